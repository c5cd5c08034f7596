"""Map representation and planar geometry: boxes, road polygons, polylines, lane graphs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SEGMENT_MAX = 10.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class OrientedBox:
    center: tuple[float, float]
    heading: float
    half_length: float
    half_width: float

    def __post_init__(self):
        if not (self.half_length > 0 and self.half_width > 0):
            raise GeometryError("box half extents must be positive")

    def corners(self) -> np.ndarray:
        return box_corners(np.asarray(self.center, float), self.heading,
                           self.half_length, self.half_width)


@dataclass(frozen=True)
class PolylineProjection:
    arclength: float
    lateral: float
    clamped: bool


def box_corners(center, heading, half_length, half_width) -> np.ndarray:
    """Corners ``(..., 4, 2)`` in counter-clockwise order."""
    center = np.asarray(center, float)
    c, s = np.cos(heading), np.sin(heading)
    fx, fy = c * half_length, s * half_length
    lx, ly = -s * half_width, c * half_width
    cx, cy = center[..., 0], center[..., 1]
    xs = np.stack([cx + fx - lx, cx + fx + lx, cx - fx + lx, cx - fx - lx], axis=-1)
    ys = np.stack([cy + fy - ly, cy + fy + ly, cy - fy + ly, cy - fy - ly], axis=-1)
    return np.stack([xs, ys], axis=-1)


# ------------------------------------------------------------------ collision

def sat_overlap_matrix(centers, headings, half_lengths, half_widths) -> np.ndarray:
    """Pairwise closed-box overlap over the last agent axis: ``(..., A)`` -> ``(..., A, A)``.

    Separating-axis test over the two edge normals of each box.
    """
    centers = np.asarray(centers, float)
    headings = np.asarray(headings, float)
    hl = np.asarray(half_lengths, float)
    hw = np.asarray(half_widths, float)
    axes = np.stack([np.stack([np.cos(headings), np.sin(headings)], -1),
                     np.stack([-np.sin(headings), np.cos(headings)], -1)], axis=-2)  # (...,A,2,2)
    d = centers[..., None, :, :] - centers[..., :, None, :]  # (...,A,A,2): j - i
    # project onto axes of i (k=0,1) and axes of j
    overlap = np.ones(d.shape[:-1], dtype=bool)
    for owner in (0, 1):
        ax = axes[..., :, None, :, :] if owner == 0 else axes[..., None, :, :, :]  # (...,A,A,2,2)
        for k in range(2):
            n = ax[..., k, :]
            dist = np.abs(np.sum(d * n, axis=-1))
            ri = _radius(axes[..., :, None, :, :], hl[..., :, None], hw[..., :, None], n)
            rj = _radius(axes[..., None, :, :, :], hl[..., None, :], hw[..., None, :], n)
            overlap &= dist <= ri + rj
    return overlap


def _radius(box_axes, hl, hw, n):
    return (hl * np.abs(np.sum(box_axes[..., 0, :] * n, axis=-1))
            + hw * np.abs(np.sum(box_axes[..., 1, :] * n, axis=-1)))


def sat_signed_separation(a: OrientedBox, b: OrientedBox) -> float:
    """Largest axis gap (positive: separated) or minus the smallest overlap (penetration)."""
    best = -math.inf
    for h in (a.heading, b.heading):
        for n in (np.array([math.cos(h), math.sin(h)]), np.array([-math.sin(h), math.cos(h)])):
            pa = a.corners() @ n
            pb = b.corners() @ n
            gap = max(pb.min() - pa.max(), pa.min() - pb.max())
            best = max(best, gap)
    return float(best)


def obb_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    m = sat_overlap_matrix(np.array([a.center, b.center]), np.array([a.heading, b.heading]),
                           np.array([a.half_length, b.half_length]),
                           np.array([a.half_width, b.half_width]))
    return bool(m[0, 1])


# ------------------------------------------------------------------- polygons

def points_in_polygon(points, polygon) -> np.ndarray:
    """Even-odd ray casting; ``points`` is ``(..., 2)``."""
    pts = np.asarray(points, float)
    poly = np.asarray(polygon, float)
    x, y = pts[..., 0][..., None], pts[..., 1][..., None]
    x1, y1 = poly[:, 0], poly[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    crosses = (y1 > y) != (y2 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    hits = crosses & (x < xint)
    return (np.count_nonzero(hits, axis=-1) % 2) == 1


def _segments_intersect(p1, p2, q1, q2) -> np.ndarray:
    """Closed segment intersection, broadcasting over leading axes."""
    def orient(a, b, c):
        return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])

    def on_seg(a, b, c):
        return ((np.minimum(a[..., 0], b[..., 0]) <= c[..., 0]) & (c[..., 0] <= np.maximum(a[..., 0], b[..., 0]))
                & (np.minimum(a[..., 1], b[..., 1]) <= c[..., 1]) & (c[..., 1] <= np.maximum(a[..., 1], b[..., 1])))

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    proper = (((d1 > 0) & (d2 < 0)) | ((d1 < 0) & (d2 > 0))) & (((d3 > 0) & (d4 < 0)) | ((d3 < 0) & (d4 > 0)))
    touch = ((d1 == 0) & on_seg(q1, q2, p1)) | ((d2 == 0) & on_seg(q1, q2, p2)) \
        | ((d3 == 0) & on_seg(p1, p2, q1)) | ((d4 == 0) & on_seg(p1, p2, q2))
    return proper | touch


def boxes_intersect_polygon(corners, polygon) -> np.ndarray:
    """Whether each box ``(..., 4, 2)`` intersects the closed polygon region."""
    corners = np.asarray(corners, float)
    poly = np.asarray(polygon, float)
    hit = points_in_polygon(corners, poly).any(axis=-1)
    # polygon vertices inside a box (convex, CCW corners)
    e = np.roll(corners, -1, axis=-2) - corners  # (...,4,2)
    rel = poly[..., None, :, :] - corners[..., :, None, :]  # (...,4,V,2)
    cross = e[..., :, None, 0] * rel[..., 1] - e[..., :, None, 1] * rel[..., 0]
    hit |= (cross >= 0).all(axis=-2).any(axis=-1)
    # edge crossings
    p1 = corners[..., :, None, :]
    p2 = np.roll(corners, -1, axis=-2)[..., :, None, :]
    q1 = poly
    q2 = np.roll(poly, -1, axis=0)
    hit |= _segments_intersect(p1, p2, q1, q2).any(axis=(-1, -2))
    return hit


def points_in_polygons(points, polygons) -> np.ndarray:
    """Batched ray casting: ``points`` ``(B, ..., 2)`` against ``polygons`` ``(B, V, 2)``."""
    pts = np.asarray(points, float)
    poly = np.asarray(polygons, float)
    shape = (poly.shape[0],) + (1,) * (pts.ndim - 2) + poly.shape[1:]
    poly = poly.reshape(shape)
    x, y = pts[..., 0][..., None], pts[..., 1][..., None]
    x1, y1 = poly[..., 0], poly[..., 1]
    x2, y2 = np.roll(x1, -1, axis=-1), np.roll(y1, -1, axis=-1)
    crosses = (y1 > y) != (y2 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    return (np.count_nonzero(crosses & (x < xint), axis=-1) % 2) == 1


def boxes_intersect_polygons(corners, polygons) -> np.ndarray:
    """Batched :func:`boxes_intersect_polygon`: corners ``(B, A, 4, 2)``, polygons ``(B, V, 2)``."""
    corners = np.asarray(corners, float)
    poly = np.asarray(polygons, float)
    hit = points_in_polygons(corners, poly).any(axis=-1)
    e = np.roll(corners, -1, axis=-2) - corners
    rel = poly[:, None, None, :, :] - corners[..., :, None, :]  # (B,A,4,V,2)
    cross = e[..., :, None, 0] * rel[..., 1] - e[..., :, None, 1] * rel[..., 0]
    hit |= (cross >= 0).all(axis=-2).any(axis=-1)
    p1 = corners[..., :, None, :]
    p2 = np.roll(corners, -1, axis=-2)[..., :, None, :]
    q1 = poly[:, None, None, :, :]
    q2 = np.roll(poly, -1, axis=1)[:, None, None, :, :]
    hit |= _segments_intersect(p1, p2, q1, q2).any(axis=(-1, -2))
    return hit


def offroad_check(box: OrientedBox, road) -> bool:
    """Off-road iff the box no longer intersects the road polygon at all."""
    return not bool(boxes_intersect_polygon(box.corners(), road))


def polygon_is_simple(polygon) -> bool:
    poly = np.asarray(polygon, float)
    n = len(poly)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue
            if _segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]):
                return False
    return True


def polygon_signed_area(polygon) -> float:
    p = np.asarray(polygon, float)
    return 0.5 * float(np.sum(p[:, 0] * np.roll(p[:, 1], -1) - np.roll(p[:, 0], -1) * p[:, 1]))


# ------------------------------------------------------------------ polylines

def polyline_length(line) -> float:
    line = np.asarray(line, float)
    return float(np.sum(np.linalg.norm(np.diff(line, axis=0), axis=1)))


def point_at_arclength(line, s: float) -> np.ndarray:
    line = np.asarray(line, float)
    seg = np.linalg.norm(np.diff(line, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = min(max(s, 0.0), cum[-1])
    k = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1))
    while seg[k] == 0 and k > 0:
        k -= 1
    t = 0.0 if seg[k] == 0 else (s - cum[k]) / seg[k]
    return line[k] + t * (line[k + 1] - line[k])


def project_onto_polyline(p, line) -> PolylineProjection:
    """Closest point on the polyline; ties resolved towards the smaller arclength."""
    line = np.asarray(line, float)
    p = np.asarray(p, float)
    if line.ndim != 2 or len(line) < 2:
        raise GeometryError("polyline needs at least two vertices")
    d = np.diff(line, axis=0)
    seg = np.linalg.norm(d, axis=1)
    if not np.any(seg > 0):
        raise GeometryError("degenerate polyline")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    best = None
    nonzero = np.flatnonzero(seg > 0)
    first, last = nonzero[0], nonzero[-1]
    for k in nonzero:
        raw_t = float(np.dot(p - line[k], d[k]) / seg[k] ** 2)
        t = min(max(raw_t, 0.0), 1.0)
        foot = line[k] + t * d[k]
        dist = float(np.linalg.norm(p - foot))
        if best is None or dist < best[0] - 1e-12:
            clamped = (k == first and raw_t < 0.0) or (k == last and raw_t > 1.0)
            u = d[k] / seg[k]
            lateral = float(u[0] * (p[1] - foot[1]) - u[1] * (p[0] - foot[0]))
            if not clamped and t in (0.0, 1.0):
                # foot at an interior vertex: lateral is the signed distance
                lateral = math.copysign(dist, lateral) if lateral != 0 else 0.0
            best = (dist, cum[k] + t * seg[k], lateral, clamped)
    return PolylineProjection(arclength=float(best[1]), lateral=best[2], clamped=bool(best[3]))


def project_points(points, line) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection of ``(M, 2)`` points: ``(arclength, lateral)`` per point.

    Same closest-point rule as :func:`project_onto_polyline`; lateral is the
    cross-track offset relative to the chosen segment's direction.
    """
    line = np.asarray(line, float)
    pts = np.atleast_2d(np.asarray(points, float))
    d = np.diff(line, axis=0)
    seg = np.linalg.norm(d, axis=1)
    keep = seg > 0
    a, d, seg = line[:-1][keep], d[keep], seg[keep]
    cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(line, axis=0), axis=1))])[:-1][keep]
    w = pts[:, None, :] - a[None]
    raw = np.sum(w * d[None], -1) / seg ** 2
    t = np.clip(raw, 0.0, 1.0)
    foot = a[None] + t[..., None] * d[None]
    dist2 = np.sum((pts[:, None] - foot) ** 2, -1)
    k = np.argmin(dist2, axis=1)
    r = np.arange(len(pts))
    u = d[k] / seg[k, None]
    rel = pts - foot[r, k]
    lateral = u[:, 0] * rel[:, 1] - u[:, 1] * rel[:, 0]
    n = len(seg)
    clamped = ((k == 0) & (raw[r, k] < 0.0)) | ((k == n - 1) & (raw[r, k] > 1.0))
    corner = ((t[r, k] == 0.0) | (t[r, k] == 1.0)) & ~clamped
    lateral = np.where(corner & (lateral != 0), np.sign(lateral) * np.sqrt(dist2[r, k]), lateral)
    return cum[k] + t[r, k] * seg[k], lateral


# ----------------------------------------------------------------- lane graph

@dataclass(frozen=True)
class LaneNode:
    lane: int
    index: int
    center: tuple[float, float]
    heading: float
    length: float
    width: float
    curvature: float
    speed_limit: float
    start: tuple[float, float]
    end: tuple[float, float]


@dataclass
class LaneGraph:
    nodes: list[LaneNode]
    edges: dict[str, list[tuple[int, int]]]
    road_polygon: np.ndarray
    lanes: list[np.ndarray] = field(default_factory=list)
    lane_widths: list[float] = field(default_factory=list)
    lane_speed_limits: list[float] = field(default_factory=list)
    name: str = ""

    def segment_arrays(self) -> dict[str, np.ndarray]:
        """Flat per-node arrays used by the vectorised feature code."""
        if not hasattr(self, "_seg"):
            n = self.nodes
            self._seg = {
                "start": np.array([x.start for x in n]),
                "end": np.array([x.end for x in n]),
                "heading": np.array([x.heading for x in n]),
                "speed_limit": np.array([x.speed_limit for x in n]),
                "curvature": np.array([x.curvature for x in n]),
                "lane": np.array([x.lane for x in n]),
            }
        return self._seg


def _heading_at(line: np.ndarray, s: float, h: float = 0.5) -> float:
    total = polyline_length(line)
    a = point_at_arclength(line, max(s - h, 0.0))
    b = point_at_arclength(line, min(s + h, total))
    return math.atan2(b[1] - a[1], b[0] - a[0])


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def build_lane_graph(map_spec: dict) -> LaneGraph:
    """Discretise lane centerlines into <=10 m segments and connect them."""
    lanes = map_spec.get("lanes")
    if not lanes:
        raise GeometryError("map needs at least one lane")
    poly = np.asarray(map_spec.get("road_polygon"), float)
    if poly.ndim != 2 or len(poly) < 3:
        raise GeometryError("road polygon needs at least three vertices")
    if polygon_signed_area(poly) < 0:
        poly = poly[::-1].copy()
    nodes: list[LaneNode] = []
    edges = {"successor": [], "predecessor": [], "left_neighbor": [], "right_neighbor": []}
    lines, widths, limits = [], [], []
    for li, lane in enumerate(lanes):
        if lane.get("speed_limit") is None:
            raise GeometryError(f"lane {li} has no speed limit")
        line = np.asarray(lane["centerline"], float)
        total = polyline_length(line)
        if total < 1.0:
            raise GeometryError(f"lane {li} centerline shorter than 1 m")
        width = float(lane.get("width", 3.7))
        limit = float(lane["speed_limit"])
        lines.append(line)
        widths.append(width)
        limits.append(limit)
        n = math.ceil(total / SEGMENT_MAX - 1e-9)
        seg_len = total / n
        base = len(nodes)
        for k in range(n):
            s0, s1 = k * seg_len, (k + 1) * seg_len
            p0, p1 = point_at_arclength(line, s0), point_at_arclength(line, s1)
            mid = point_at_arclength(line, 0.5 * (s0 + s1))
            h0, h1 = _heading_at(line, s0), _heading_at(line, s1)
            curv = float(_wrap(h1 - h0) / seg_len)
            nodes.append(LaneNode(lane=li, index=k, center=(float(mid[0]), float(mid[1])),
                                  heading=math.atan2(p1[1] - p0[1], p1[0] - p0[0]),
                                  length=seg_len, width=width, curvature=curv, speed_limit=limit,
                                  start=(float(p0[0]), float(p0[1])), end=(float(p1[0]), float(p1[1]))))
            if k > 0:
                edges["successor"].append((base + k - 1, base + k))
                edges["predecessor"].append((base + k, base + k - 1))
    _connect_neighbors(nodes, edges)
    inside = points_in_polygon(np.array([nd.center for nd in nodes]), poly)
    if not inside.all():
        raise GeometryError("lane node centers must lie inside the road polygon")
    return LaneGraph(nodes=nodes, edges=edges, road_polygon=poly, lanes=lines,
                     lane_widths=widths, lane_speed_limits=limits, name=str(map_spec.get("name", "")))


def _connect_neighbors(nodes: list[LaneNode], edges: dict) -> None:
    centers = np.array([n.center for n in nodes])
    heads = np.array([n.heading for n in nodes])
    lanes = np.array([n.lane for n in nodes])
    for i, nd in enumerate(nodes):
        c, s = math.cos(nd.heading), math.sin(nd.heading)
        rel = centers - centers[i]
        lon = rel[:, 0] * c + rel[:, 1] * s
        lat = -rel[:, 0] * s + rel[:, 1] * c
        ok = ((lanes != nd.lane) & (np.abs(_wrap(heads - nd.heading)) < math.radians(30))
              & (np.abs(lat) >= 0.5 * nd.width) & (np.abs(lat) <= 1.5 * nd.width)
              & (np.abs(lon) <= 0.5 * nd.length + 1e-9))
        for side, sign in (("left_neighbor", 1.0), ("right_neighbor", -1.0)):
            cand = np.flatnonzero(ok & (np.sign(lat) == sign))
            if len(cand):
                j = int(cand[np.argmin(np.abs(lon[cand]) + 1e-6 * cand)])
                edges[side].append((i, j))
