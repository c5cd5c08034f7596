import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import sampled_overlap
from trafficrl.geometry import (GeometryError, OrientedBox, build_lane_graph, obb_overlap, offroad_check,
                                points_in_polygon, polygon_is_simple, polyline_length, project_onto_polyline,
                                project_points, sat_overlap_matrix, sat_signed_separation)
from trafficrl.maps import MAP_BUILDERS

finite = dict(allow_nan=False, allow_infinity=False)
boxes = st.builds(OrientedBox, st.tuples(st.floats(-5, 5, **finite), st.floats(-5, 5, **finite)),
                  st.floats(-math.pi, math.pi, **finite), st.floats(0.1, 3, **finite), st.floats(0.1, 3, **finite))


def _tuple(b):
    return b.center, b.heading, b.half_length, b.half_width


def test_overlap_examples():
    unit = OrientedBox((0, 0), 0, 0.5, 0.5)
    assert obb_overlap(unit, OrientedBox((0.5, 0), 0, 0.5, 0.5))
    assert not obb_overlap(unit, OrientedBox((10, 0), 0, 0.5, 0.5))
    rotated = OrientedBox((1.2, 0), math.pi / 4, 0.5, 0.5)
    assert obb_overlap(unit, rotated) == sampled_overlap(_tuple(unit), _tuple(rotated)) is True


def test_degenerate_box_rejected():
    with pytest.raises(GeometryError):
        OrientedBox((0, 0), 0, 0.0, 1.0)


@given(boxes, boxes)
def test_overlap_symmetric(a, b):
    assert obb_overlap(a, b) == obb_overlap(b, a)


@settings(max_examples=200)
@given(boxes, boxes)
def test_overlap_matches_sampling_oracle(a, b):
    if abs(sat_signed_separation(a, b)) < 1e-3:
        return
    assert obb_overlap(a, b) == sampled_overlap(_tuple(a), _tuple(b))


def test_overlap_matrix_matches_pairwise(rng):
    c = rng.uniform(-6, 6, size=(7, 2))
    th = rng.uniform(-3, 3, size=7)
    hl, hw = rng.uniform(0.5, 3, size=7), rng.uniform(0.3, 1.5, size=7)
    m = sat_overlap_matrix(c, th, hl, hw)
    for i in range(7):
        for j in range(7):
            assert m[i, j] == obb_overlap(OrientedBox(tuple(c[i]), th[i], hl[i], hw[i]),
                                          OrientedBox(tuple(c[j]), th[j], hl[j], hw[j]))


ROAD = np.array([[0, 0], [100, 0], [100, 10], [0, 10]], float)


def test_offroad_examples():
    assert not offroad_check(OrientedBox((50, 5), 0, 2, 1), ROAD)
    assert offroad_check(OrientedBox((50, 65), 0, 2, 1), ROAD)
    assert not offroad_check(OrientedBox((50, 10), 0, 2, 1), ROAD)


@given(st.floats(-10, 110, **finite), st.floats(-10, 20, **finite), st.floats(-math.pi, math.pi, **finite))
def test_offroad_false_when_a_corner_is_inside(x, y, th):
    box = OrientedBox((x, y), th, 2.3, 0.95)
    if points_in_polygon(box.corners(), ROAD).any():
        assert not offroad_check(box, ROAD)


def test_projection_examples():
    line = np.array([[0, 0], [10, 0]], float)
    p = project_onto_polyline((1, 1), line)
    assert (p.arclength, p.lateral, p.clamped) == (pytest.approx(1.0), pytest.approx(1.0), False)
    p = project_onto_polyline((12, 0), line)
    assert p.arclength == pytest.approx(10.0) and p.clamped
    p = project_onto_polyline((4, 0), line)
    assert p.lateral == 0 and not p.clamped
    with pytest.raises(GeometryError):
        project_onto_polyline((0, 0), np.zeros((3, 2)))


def test_projection_tie_breaks_to_smallest_arclength():
    line = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], float)
    p = project_onto_polyline((5, 5), line)  # equidistant from all three segments
    assert p.arclength == pytest.approx(5.0)


def test_project_points_agrees_with_scalar_projection(rng):
    line = np.cumsum(rng.normal(size=(8, 2)) * 5, axis=0)
    pts = rng.uniform(-20, 20, size=(200, 2))
    s, lat = project_points(pts, line)
    for k in range(len(pts)):
        p = project_onto_polyline(pts[k], line)
        assert s[k] == pytest.approx(p.arclength, abs=1e-9)
        assert lat[k] == pytest.approx(p.lateral, abs=1e-9)


def test_projection_is_global_minimum(rng):
    line = np.cumsum(rng.normal(size=(12, 2)) * 4, axis=0)
    for p in rng.uniform(-30, 30, size=(1000, 2)):
        proj = project_onto_polyline(p, line)
        assert abs(proj.lateral) <= np.min(np.linalg.norm(line - p, axis=1)) + 1e-9
        assert 0 <= proj.arclength <= polyline_length(line) + 1e-9


def _single_lane(length=100.0):
    return {"lanes": [{"centerline": [[0, 0], [length, 0]], "width": 3.7, "speed_limit": 25}],
            "road_polygon": [[-1, -3], [length + 1, -3], [length + 1, 3], [-1, 3]]}


def test_lane_graph_chain():
    g = build_lane_graph(_single_lane())
    assert len(g.nodes) == 10
    assert len(g.edges["successor"]) == 9 and len(g.edges["predecessor"]) == 9
    assert sorted(g.edges["successor"]) == sorted((b, a) for a, b in g.edges["predecessor"])


def test_two_parallel_lanes_have_one_neighbor_each():
    spec = {"lanes": [{"centerline": [[0, 0], [100, 0]], "width": 3.7, "speed_limit": 25},
                      {"centerline": [[0, 3.7], [100, 3.7]], "width": 3.7, "speed_limit": 25}],
            "road_polygon": [[-1, -2], [101, -2], [101, 6], [-1, 6]]}
    g = build_lane_graph(spec)
    count = np.zeros(len(g.nodes), int)
    for side in ("left_neighbor", "right_neighbor"):
        for i, _ in g.edges[side]:
            count[i] += 1
    assert (count == 1).all()


def test_lane_graph_rejections():
    with pytest.raises(GeometryError):
        build_lane_graph(_single_lane(0.5))
    spec = _single_lane()
    del spec["lanes"][0]["speed_limit"]
    with pytest.raises(GeometryError):
        build_lane_graph(spec)


@pytest.mark.parametrize("variant", sorted(MAP_BUILDERS))
def test_builtin_maps_satisfy_invariants(variant):
    g = build_lane_graph(MAP_BUILDERS[variant]())
    assert polygon_is_simple(g.road_polygon)
    assert all(0 < n.length <= 10 + 1e-9 for n in g.nodes)
    assert points_in_polygon(np.array([n.center for n in g.nodes]), g.road_polygon).all()
