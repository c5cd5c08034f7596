"""Hand-crafted per-agent features, expressed in each agent's own frame.

All arithmetic goes through :mod:`autodiff`, so features of a taped scene are
themselves taped and gradients flow from the policy back into the states.
Discrete choices (neighbour ordering, nearest lane segment, nearest road edge)
are made on plain values and held constant under differentiation.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .geometry import points_in_polygons
from .scene import SceneState

K_NEIGHBORS = 4
NEIGHBOR_RADIUS = 50.0
HERO_RADIUS = 30.0
OFFMAP_DIST = 4.0
HEADING_COST = 20.0  # m^2 per unit of (1 - cos heading error) when picking a lane segment

POS_SCALE = 20.0
VEL_SCALE = 10.0
LAT_SCALE = 2.0
BOUND_SCALE = 5.0
CURV_SCALE = 100.0

HIST_CH = 5
NBR_CH = 6
LANE_CH = 6


def feature_dim(horizon: int = 10) -> int:
    return HIST_CH * (horizon + 1) + NBR_CH * K_NEIGHBORS + LANE_CH + 1


def _history(S, Hs):
    x, y, th = S[..., 0], S[..., 1], S[..., 2]
    c, s = ad.cos(th), ad.sin(th)
    dx = Hs[..., 0] - x[..., None]
    dy = Hs[..., 1] - y[..., None]
    relx = (dx * c[..., None] + dy * s[..., None]) / POS_SCALE
    rely = (dy * c[..., None] - dx * s[..., None]) / POS_SCALE
    dth = Hs[..., 2] - th[..., None]
    h = ad.stack([relx, rely, ad.cos(dth), ad.sin(dth), Hs[..., 3] / VEL_SCALE], axis=-1)
    B, A, T1, _ = ad.value(h).shape
    return ad.reshape(h, (B, A, T1 * HIST_CH))


def _neighbors(S, scene: SceneState):
    sv = ad.value(S)
    B, A = scene.present.shape
    x, y, th, v = S[..., 0], S[..., 1], S[..., 2], S[..., 3]
    c, s = ad.cos(th), ad.sin(th)
    dx = x[:, None, :] - x[:, :, None]  # (B, i, j): j relative to i
    dy = y[:, None, :] - y[:, :, None]
    relx = (dx * c[..., None] + dy * s[..., None]) / POS_SCALE
    rely = (dy * c[..., None] - dx * s[..., None]) / POS_SCALE
    dth = th[:, None, :] - th[:, :, None]
    dv = (v[:, None, :] - v[:, :, None]) / VEL_SCALE
    pair = ad.stack([relx, rely, ad.cos(dth), ad.sin(dth), dv], axis=-1)  # (B,A,A,5)

    dxv = sv[:, None, :, 0] - sv[:, :, None, 0]
    dyv = sv[:, None, :, 1] - sv[:, :, None, 1]
    d2 = dxv * dxv + dyv * dyv
    ok = (scene.present & scene.alive)[:, None, :] & ~np.eye(A, dtype=bool)[None]
    d2 = np.where(ok & (d2 <= NEIGHBOR_RADIUS ** 2), d2, np.inf)
    kk = min(K_NEIGHBORS, A)
    order = np.argsort(d2, axis=-1, kind="stable")[..., :kk]  # stable: ties by agent index
    valid = np.isfinite(np.take_along_axis(d2, order, axis=-1))  # (B,A,kk)
    idx = np.broadcast_to(order[..., None], (B, A, kk, 5)).copy()
    picked = ad.take_along_axis(pair, idx, axis=2) * valid[..., None]
    slots = ad.concatenate([picked, (~valid).astype(float)[..., None]], axis=-1)  # (B,A,kk,6)
    out = ad.reshape(slots, (B, A, kk * NBR_CH))
    if kk < K_NEIGHBORS:
        pad = np.zeros((B, A, K_NEIGHBORS - kk, NBR_CH))
        pad[..., -1] = 1.0
        out = ad.concatenate([out, pad.reshape(B, A, -1)], axis=-1)
    return out


def nearest_segments(sv: np.ndarray, maps) -> tuple[np.ndarray, np.ndarray]:
    """Index of the best-matching lane segment per agent and its point distance."""
    p = sv[..., :2]
    st, en = maps.seg_start, maps.seg_end
    d = en - st
    w = p[:, :, None, :] - st[:, None, :, :]
    L2 = np.maximum(np.sum(d * d, -1), 1e-12)[:, None, :]
    t = np.clip(np.sum(w * d[:, None], -1) / L2, 0.0, 1.0)
    foot = st[:, None] + t[..., None] * d[:, None]
    dist2 = np.sum((p[:, :, None] - foot) ** 2, -1)
    cost = dist2 + HEADING_COST * (1.0 - np.cos(sv[..., 2][..., None] - maps.seg_heading[:, None]))
    cost = np.where(maps.seg_valid[:, None], cost, np.inf)
    j = np.argmin(cost, axis=-1)
    return j, np.sqrt(np.take_along_axis(dist2, j[..., None], -1)[..., 0])


def _lane(S, scene: SceneState):
    sv = ad.value(S)
    maps = scene.maps
    j, dist = nearest_segments(sv, maps)
    off = dist > OFFMAP_DIST
    on = (~off).astype(float)
    p0 = np.take_along_axis(maps.seg_start, j[..., None], axis=1)
    p1 = np.take_along_axis(maps.seg_end, j[..., None], axis=1)
    u = p1 - p0
    u = u / np.maximum(np.linalg.norm(u, axis=-1, keepdims=True), 1e-12)
    head = np.take_along_axis(maps.seg_heading, j, axis=1)
    limit = np.take_along_axis(maps.seg_limit, j, axis=1)
    curv = np.take_along_axis(maps.seg_curv, j, axis=1)
    x, y, th = S[..., 0], S[..., 1], S[..., 2]
    lateral = (u[..., 0] * (y - p0[..., 1]) - u[..., 1] * (x - p0[..., 0])) / LAT_SCALE
    err = th - head
    herr = ad.atan2(ad.sin(err), ad.cos(err))

    # signed distance from the box side to the nearest road edge (positive inside)
    half = 0.5 * scene.dims[..., 0]
    c, s = ad.cos(th), ad.sin(th)
    cx, cy = x + half * c, y + half * s
    q1 = maps.polygon
    q2 = np.roll(q1, -1, axis=1)
    e = q2 - q1
    e2 = np.maximum(np.sum(e * e, -1), 1e-12)  # (B,V)
    pc = np.stack([ad.value(cx), ad.value(cy)], -1)
    tt = np.clip(np.sum((pc[:, :, None] - q1[:, None]) * e[:, None], -1) / e2[:, None], 0.0, 1.0)
    foot = q1[:, None] + tt[..., None] * e[:, None]
    k = np.argmin(np.sum((pc[:, :, None] - foot) ** 2, -1), axis=-1)  # (B,A)
    a1 = np.take_along_axis(q1, k[..., None], axis=1)
    ev = np.take_along_axis(e, k[..., None], axis=1)
    ee = np.take_along_axis(e2, k, axis=1)
    t = ad.clip(((cx - a1[..., 0]) * ev[..., 0] + (cy - a1[..., 1]) * ev[..., 1]) / ee, 0.0, 1.0)
    fx = cx - (a1[..., 0] + t * ev[..., 0])
    fy = cy - (a1[..., 1] + t * ev[..., 1])
    bdist = ad.sqrt(fx * fx + fy * fy + 1e-12)
    sign = np.where(points_in_polygons(pc, maps.polygon), 1.0, -1.0)
    bound = (bdist * sign - 0.5 * scene.dims[..., 2]) / BOUND_SCALE

    return ad.stack([lateral * on, herr * on, limit * on / VEL_SCALE, curv * on * CURV_SCALE,
                     bound, off.astype(float)], axis=-1)


def _hero_flag(sv: np.ndarray, scene: SceneState) -> np.ndarray:
    d = np.linalg.norm(sv[:, None, :, :2] - sv[:, :, None, :2], axis=-1)
    A = sv.shape[1]
    near = (d <= HERO_RADIUS) & (scene.hero & scene.present & scene.alive)[:, None, :] & ~np.eye(A, dtype=bool)
    return near.any(axis=-1).astype(float)[..., None]


def scene_features(scene: SceneState):
    """Features for every agent slot: ``(B, A, feature_dim)``."""
    S, Hs = scene.states, scene.history
    sv = ad.value(S)
    return ad.concatenate([_history(S, Hs), _neighbors(S, scene), _lane(S, scene),
                           _hero_flag(sv, scene)], axis=-1)


def extract_features(scene: SceneState, agent_index: int, batch_index: int = 0) -> np.ndarray:
    """Plain-valued feature vector of one agent."""
    return ad.value(scene_features(scene.scene(batch_index)))[0, agent_index]
