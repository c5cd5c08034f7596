"""Batched scene state: B independent scenarios padded to a common agent count."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .geometry import LaneGraph, box_corners


@dataclass
class MapBatch:
    graphs: list[LaneGraph]
    seg_start: np.ndarray    # (B, S, 2)
    seg_end: np.ndarray      # (B, S, 2)
    seg_heading: np.ndarray  # (B, S)
    seg_limit: np.ndarray    # (B, S)
    seg_curv: np.ndarray     # (B, S)
    seg_valid: np.ndarray    # (B, S)
    polygon: np.ndarray      # (B, V, 2), padded by repeating the last vertex

    @classmethod
    def from_graphs(cls, graphs: Sequence[LaneGraph]) -> "MapBatch":
        graphs = list(graphs)
        B = len(graphs)
        S = max(len(g.nodes) for g in graphs)
        V = max(len(g.road_polygon) for g in graphs)
        start = np.zeros((B, S, 2))
        end = np.zeros((B, S, 2))
        end[..., 0] = 1.0
        head = np.zeros((B, S))
        lim = np.ones((B, S))
        curv = np.zeros((B, S))
        valid = np.zeros((B, S), dtype=bool)
        poly = np.zeros((B, V, 2))
        for b, g in enumerate(graphs):
            seg = g.segment_arrays()
            n = len(g.nodes)
            start[b, :n] = seg["start"]
            end[b, :n] = seg["end"]
            head[b, :n] = seg["heading"]
            lim[b, :n] = seg["speed_limit"]
            curv[b, :n] = seg["curvature"]
            valid[b, :n] = True
            p = g.road_polygon
            poly[b, :len(p)] = p
            poly[b, len(p):] = p[-1]
        return cls(graphs, start, end, head, lim, curv, valid, poly)

    def subset(self, idx) -> "MapBatch":
        idx = np.asarray(idx)
        return MapBatch([self.graphs[i] for i in idx], self.seg_start[idx], self.seg_end[idx],
                        self.seg_heading[idx], self.seg_limit[idx], self.seg_curv[idx],
                        self.seg_valid[idx], self.polygon[idx])


@dataclass
class SceneState:
    """Joint state of every agent in B scenarios at one tick.

    ``states`` and ``history`` may be tape variables during backpropagation
    through time; everything else is constant data.
    """

    states: object           # (B, A, 4): x, y, theta, v
    history: object          # (B, A, H+1, 4), last entry equals ``states``
    dims: np.ndarray         # (B, A, 3): wheelbase, box length, box width
    present: np.ndarray      # (B, A) padding mask
    hero: np.ndarray         # (B, A)
    alive: np.ndarray        # (B, A)
    triggered: np.ndarray    # (B, A) hero trigger latch
    maps: MapBatch
    tick: int = 0
    infracted: np.ndarray = None  # (B, A) agents already penalised once

    def __post_init__(self):
        if self.infracted is None:
            self.infracted = np.zeros_like(self.present)

    @property
    def batch(self) -> int:
        return self.present.shape[0]

    @property
    def n_agents(self) -> int:
        return self.present.shape[1]

    @property
    def horizon(self) -> int:
        return ad.value(self.history).shape[2] - 1

    def values(self) -> np.ndarray:
        return ad.value(self.states)

    def box_centers(self) -> np.ndarray:
        s = self.values()
        off = 0.5 * self.dims[..., 0]
        return np.stack([s[..., 0] + off * np.cos(s[..., 2]), s[..., 1] + off * np.sin(s[..., 2])], -1)

    def corners(self) -> np.ndarray:
        s = self.values()
        return box_corners(self.box_centers(), s[..., 2], 0.5 * self.dims[..., 1], 0.5 * self.dims[..., 2])

    def advance(self, new_states, alive=None, triggered=None, infracted=None) -> "SceneState":
        B, A = self.present.shape
        hist = ad.concatenate([self.history[:, :, 1:], ad.reshape(new_states, (B, A, 1, 4))], axis=2)
        return replace(self, states=new_states, history=hist,
                       alive=self.alive if alive is None else alive,
                       triggered=self.triggered if triggered is None else triggered,
                       infracted=self.infracted if infracted is None else infracted,
                       tick=self.tick + 1)

    def detached(self) -> "SceneState":
        return replace(self, states=ad.value(self.states).copy(), history=ad.value(self.history).copy())

    def scene(self, b: int) -> "SceneState":
        """Single-scenario view (batch of one)."""
        sl = slice(b, b + 1)
        return SceneState(ad.value(self.states)[sl], ad.value(self.history)[sl], self.dims[sl],
                          self.present[sl], self.hero[sl], self.alive[sl], self.triggered[sl],
                          self.maps.subset([b]), self.tick, self.infracted[sl])
