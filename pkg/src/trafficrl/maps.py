"""Procedural highway map specs (plain dicts, JSON-serialisable)."""

from __future__ import annotations

import numpy as np

LANE_WIDTH = 3.7


def _offset(line: np.ndarray, d: float) -> np.ndarray:
    t = np.gradient(line, axis=0)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    normal = np.stack([-t[:, 1], t[:, 0]], axis=1)
    return line + d * normal


def _parallel_road(ref: np.ndarray, n_lanes: int, speed_limit: float, name: str) -> dict:
    lanes = [{"centerline": _offset(ref, k * LANE_WIDTH).round(6).tolist(),
              "width": LANE_WIDTH, "speed_limit": speed_limit} for k in range(n_lanes)]
    right = _offset(ref, -0.5 * LANE_WIDTH)
    left = _offset(ref, (n_lanes - 0.5) * LANE_WIDTH)
    polygon = np.concatenate([right, left[::-1]]).round(6).tolist()
    return {"name": name, "lanes": lanes, "road_polygon": polygon}


def straight_map(n_lanes: int = 2, length: float = 600.0, speed_limit: float = 27.0) -> dict:
    ref = np.stack([np.linspace(0.0, length, 13), np.zeros(13)], axis=1)
    return _parallel_road(ref, n_lanes, speed_limit, f"straight{n_lanes}")


def curved_map(n_lanes: int = 2, radius: float = 500.0, angle: float = 1.3,
               speed_limit: float = 25.0) -> dict:
    """A constant-radius left-hand bend; lane 0 is the rightmost lane."""
    phi = np.linspace(0.0, angle, 41)
    ref = np.stack([radius * np.sin(phi), radius * (1.0 - np.cos(phi))], axis=1)
    return _parallel_road(ref, n_lanes, speed_limit, f"curve{n_lanes}")


def merge_map(length: float = 600.0, ramp_end: float = 230.0, taper: float = 60.0,
              speed_limit: float = 27.0) -> dict:
    """Two mainline lanes plus an on-ramp from the right that joins lane 0."""
    w = LANE_WIDTH
    main = straight_map(2, length, speed_limit)
    par_end = ramp_end - taper
    xs = np.linspace(par_end, ramp_end, 9)
    # smooth cosine taper from y=-w to y=0
    ys = -w * 0.5 * (1.0 + np.cos(np.pi * (xs - par_end) / taper))
    ramp = np.concatenate([[[0.0, -w], [par_end * 0.5, -w]], np.stack([xs, ys], 1),
                           [[ramp_end + 40.0, 0.0], [length, 0.0]]])
    lanes = main["lanes"] + [{"centerline": ramp.round(6).tolist(), "width": w,
                              "speed_limit": speed_limit}]
    polygon = [[0.0, -1.5 * w], [par_end, -1.5 * w], [ramp_end, -0.5 * w],
               [length, -0.5 * w], [length, 1.5 * w], [0.0, 1.5 * w]]
    return {"name": "merge", "lanes": lanes, "road_polygon": polygon}


MAP_BUILDERS = {
    0: lambda: straight_map(2),
    1: lambda: straight_map(3),
    2: lambda: curved_map(2),
    3: lambda: merge_map(),
}


def map_variant(variant: int) -> dict:
    try:
        return MAP_BUILDERS[int(variant)]()
    except KeyError:
        raise ValueError(f"unknown map variant {variant}") from None


def n_lanes_main(spec: dict) -> int:
    return 2 if spec["name"] == "merge" else len(spec["lanes"])

