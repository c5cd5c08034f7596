import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import IDM_EXAMPLE, idm_free_road, idm_with_lead
from trafficrl import scenario as sc
from trafficrl.dynamics import step_arrays
from trafficrl.geometry import project_points


def _hero_params(family, aggr=1.0, goal=1, lane=0, cruise=20.0, trigger_distance=10.0):
    return {"family": family, "trigger": "distance", "target": 1, "lane": lane, "goal_lane": goal,
            "cruise_speed": cruise, "aggressiveness": aggr, "trigger_distance": trigger_distance,
            "trigger_ttc": 2.0}


def _two_car_scene(graph, hero_lane, hero_s, target_lane, target_s, v=20.0):
    states = []
    for lane, s in ((hero_lane, hero_s), (target_lane, target_s)):
        p, th = sc._pose(graph, lane, s)
        states.append([p[0], p[1], th, v])
    return np.array(states), np.tile(sc.DEFAULT_DIMS, (2, 1)), np.ones(2, bool)


# ------------------------------------------------------------------ IDM oracle

def test_idm_examples():
    assert sc.idm_accel(30.0, 30.0) == 0.0
    assert sc.idm_accel(0.0, 30.0) == pytest.approx(1.5)
    assert sc.idm_accel(20.0, 30.0, gap=40.0, dv=0.0) == pytest.approx(IDM_EXAMPLE, abs=1e-12)
    assert IDM_EXAMPLE == pytest.approx(0.2437, abs=1e-4)


@given(st.floats(0, 40), st.floats(5, 40), st.floats(1, 150), st.floats(-10, 10))
def test_idm_matches_reference(v, v0, gap, dv):
    assert sc.idm_accel(v, v0) == pytest.approx(idm_free_road(v, v0), rel=1e-12, abs=1e-12)
    assert sc.idm_accel(v, v0, gap, dv) == pytest.approx(idm_with_lead(v, v0, gap, dv), rel=1e-12, abs=1e-9)


# ---------------------------------------------------------------- hero scripts

def test_hard_brake_after_trigger():
    g = sc.lane_graph(0)
    states, dims, present = _two_car_scene(g, 0, 60.0, 0, 50.0)
    a, trig = sc.hero_step(0, states, dims, present, g, _hero_params("hard_brake", goal=0), triggered=True)
    assert trig and a[0] == -6.0
    a, _ = sc.hero_step(0, states, dims, present, g, _hero_params("hard_brake", aggr=0.5, goal=0), True)
    assert a[0] == -4.0


def test_hero_speed_hold_before_trigger():
    g = sc.lane_graph(0)
    states, dims, present = _two_car_scene(g, 0, 150.0, 1, 40.0)
    for fam in ("cut_in", "hard_brake"):
        a, trig = sc.hero_step(0, states, dims, present, g, _hero_params(fam), triggered=False)
        assert not trig
        assert a[0] == 0.0


def test_cut_in_steers_left_after_trigger():
    g = sc.lane_graph(0)  # lane 0 is the right lane
    states, dims, present = _two_car_scene(g, 0, 52.0, 1, 40.0)
    a, trig = sc.hero_step(0, states, dims, present, g, _hero_params("cut_in"), triggered=False)
    assert trig
    assert np.sign(a[1]) == 1.0


def test_trigger_latches():
    g = sc.lane_graph(0)
    states, dims, present = _two_car_scene(g, 0, 150.0, 1, 40.0)
    _, trig = sc.hero_step(0, states, dims, present, g, _hero_params("hard_brake"), triggered=True)
    assert trig


def test_lost_hero_holds_zero_action():
    g = sc.lane_graph(0)
    states, dims, present = _two_car_scene(g, 0, 52.0, 1, 40.0)
    states[0, 1] -= 40.0
    a, _ = sc.hero_step(0, states, dims, present, g, _hero_params("cut_in"), triggered=True)
    assert np.all(a == 0.0)


# ------------------------------------------------------------------- sampling

@pytest.mark.parametrize("family", sc.FAMILIES)
def test_concrete_scenario_contract(family):
    logical = sc.default_logical(family)
    spec = sc.sample_concrete_scenario(logical, 7)
    for name, (lo, hi) in logical.parameter_ranges.items():
        assert lo <= spec.theta[name] <= hi
    assert spec.expert_log is None and not spec.is_nominal
    assert set(spec.hero_params) == set(np.flatnonzero(spec.hero_flags))
    assert sc.placement_ok(spec.initial_states, spec.dims, spec.graph)
    again = sc.sample_concrete_scenario(logical, 7)
    assert sc.spec_to_dict(again) == sc.spec_to_dict(spec)


def test_uniform_parameter_draws():
    logical = sc.default_logical("cut_in")
    rng = np.random.default_rng(5)
    lo, hi = logical.parameter_ranges["aggressiveness"]
    draws = np.array([sc._draw_theta(logical, rng)["aggressiveness"] for _ in range(1000)])
    se = (hi - lo) / np.sqrt(12 * len(draws))
    assert abs(draws.mean() - 0.5 * (lo + hi)) < 3 * se


def test_logical_validation():
    with pytest.raises(sc.ScenarioError):
        sc.LogicalScenario("cut_in", {"aggressiveness": (1.0, 0.0)})
    with pytest.raises(sc.ScenarioError):
        sc.LogicalScenario("cut_in", {}, hero_count=0)
    with pytest.raises(sc.ScenarioError):
        sc.LogicalScenario("u_turn", {})


def test_retry_budget_exhausted():
    r = dict(sc.default_logical("hard_brake").parameter_ranges)
    r["initial_gap"] = (-4.6, -4.6)  # hero placed on top of the target
    with pytest.raises(sc.ScenarioError, match="100 attempts"):
        sc.sample_concrete_scenario(sc.LogicalScenario("hard_brake", r), 0)


def test_expert_log_replays_without_infractions(nominal_specs):
    for spec in nominal_specs:
        lg = spec.expert_log
        present = np.ones(spec.n_agents, bool)
        assert np.array_equal(lg.states[0], spec.initial_states)
        for t in range(lg.ticks):
            nxt, _ = step_arrays(lg.states[t], lg.actions[t], spec.dims[:, 0])
            assert np.max(np.abs(nxt - lg.states[t + 1])) < 1e-9
            col, off = sc.infractions(lg.states[t + 1], spec.dims, present, spec.graph)
            assert not col.any() and not off.any()


def test_expert_follows_lane(nominal_specs):
    spec = nominal_specs[0]
    for i, lane in enumerate(spec.routes):
        _, lat = project_points(spec.expert_log.states[:, i, :2], spec.graph.lanes[lane])
        assert np.max(np.abs(lat)) < 1.0


def test_initial_state_mixture():
    nominal, tail = ["n"], ["t"]
    rng = np.random.default_rng(0)
    assert {sc.sample_initial_state(0.0, nominal, tail, rng) for _ in range(50)} == {"n"}
    assert {sc.sample_initial_state(1.0, [], tail, rng) for _ in range(50)} == {"t"}
    draws = [sc.sample_initial_state(0.5, nominal, tail, rng) for _ in range(10000)]
    assert 0.48 <= draws.count("t") / len(draws) <= 0.52
    with pytest.raises(sc.ScenarioError):
        sc.sample_initial_state(1.5, nominal, tail, rng)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_generation_is_pure(seed):
    a = sc.sample_nominal_scenario(seed, log_ticks=4, n_agents=(2, 3))
    b = sc.sample_nominal_scenario(seed, log_ticks=4, n_agents=(2, 3))
    assert json.dumps(sc.spec_to_dict(a)) == json.dumps(sc.spec_to_dict(b))


def test_serialization_round_trip(nominal_specs, longtail_specs):
    for spec in [*nominal_specs, *longtail_specs]:
        text = json.dumps(sc.spec_to_dict(spec))
        back = sc.spec_from_dict(json.loads(text))
        assert sc.spec_to_dict(back) == sc.spec_to_dict(spec)
    with pytest.raises(sc.ScenarioError):
        sc.spec_from_dict({"map_variant": 0})
