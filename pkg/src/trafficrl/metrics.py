"""Evaluation: displacement errors, feature-histogram JSD, infraction rates, bootstrap CIs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .dynamics import DT
from .features import nearest_segments
from .geometry import LaneGraph, project_points
from .scenario import ExpertTrajectory, ScenarioSpec, lead_vehicle
from .scene import MapBatch

FEATURES = ("acceleration", "speed", "lateral_deviation", "lead_distance")
DEFAULT_EDGES = {
    "acceleration": np.linspace(-6.0, 6.0, 25),
    "speed": np.linspace(0.0, 40.0, 41),
    "lateral_deviation": np.linspace(-3.0, 3.0, 25),
    "lead_distance": np.linspace(0.0, 100.0, 26),
}
LEAD_RANGE = 100.0


class MetricError(ValueError):
    pass


@dataclass
class Track:
    """One scenario's evaluated motion: states, actions and which agents count."""

    states: np.ndarray    # (T+1, N, 4)
    actions: np.ndarray   # (T, N, 2)
    learner: np.ndarray   # (N,) agents included in statistics
    spec: ScenarioSpec | None = None
    collision: np.ndarray | None = None  # (T, N)
    offroad: np.ndarray | None = None    # (T, N)

    @classmethod
    def from_expert(cls, spec: ScenarioSpec) -> "Track":
        log = spec.expert_log
        return cls(log.states, log.actions, ~spec.hero_flags, spec)

    @classmethod
    def from_rollout(cls, traj, b: int = 0) -> "Track":
        one = traj.scene(b)
        spec = one.specs[0] if one.specs else None
        return cls(one.states[0], one.actions[0], np.isin(one.source[0], ("learner", "oracle")), spec,
                   one.collision[0], one.offroad[0])


def _tracks(items) -> list[Track]:
    if not isinstance(items, (list, tuple)):
        items = [items]
    out = []
    for x in items:
        if isinstance(x, Track):
            out.append(x)
        elif isinstance(x, ScenarioSpec):
            out.append(Track.from_expert(x))
        else:  # batched simulator trajectory
            out.extend(Track.from_rollout(x, b) for b in range(x.batch))
    return out


def _positions(x) -> np.ndarray:
    if isinstance(x, (Track, ExpertTrajectory)):
        return np.asarray(x.states)[..., :2]
    s = np.asarray(getattr(x, "states", x), float)
    if s.ndim == 4:  # batched trajectory of one scene
        s = s[0]
    return s[..., :2]


def horizon_tick(horizon_s: float, dt: float = DT) -> int:
    return int(round(horizon_s / dt))


# ---------------------------------------------------------- reconstruction

def fde(sim, gt, horizon_s: float = 5.0, dt: float = DT) -> np.ndarray:
    """Per-agent Euclidean position error at the horizon tick."""
    k = horizon_tick(horizon_s, dt)
    ps, pg = _positions(sim), _positions(gt)
    if k >= len(ps) or k >= len(pg):
        raise MetricError(f"horizon tick {k} beyond trajectory length")
    if ps.shape[1] != pg.shape[1]:
        raise MetricError("simulated and ground-truth agent sets differ")
    return np.linalg.norm(ps[k] - pg[k], axis=-1)


def ate_cte(sim, gt, horizon_s: float = 5.0, dt: float = DT):
    """Along- and cross-track errors at the horizon against each agent's GT path."""
    k = horizon_tick(horizon_s, dt)
    ps, pg = _positions(sim), _positions(gt)
    if k >= len(ps) or k >= len(pg):
        raise MetricError(f"horizon tick {k} beyond trajectory length")
    n = ps.shape[1]
    ate, cte = np.zeros(n), np.zeros(n)
    for i in range(n):
        path = pg[:, i]
        seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
        if not np.any(seg > 0):
            raise MetricError(f"agent {i} has a degenerate ground-truth path")
        s_gt = float(np.sum(seg[:k]))
        s_sim, lat = project_points(ps[k, i], path)
        ate[i] = abs(s_gt - s_sim[0])
        cte[i] = abs(lat[0])
    return ate, cte


# ------------------------------------------------------------- histograms

@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def mass(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total > 0 else np.zeros_like(self.counts, dtype=float)

    @classmethod
    def from_samples(cls, samples, edges) -> "Histogram":
        edges = np.asarray(edges, float)
        x = np.asarray(samples, float)
        nb = len(edges) - 1
        idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, nb - 1)
        return cls(edges, np.bincount(idx, minlength=nb).astype(float))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats; accepts histograms or mass vectors."""
    if isinstance(p, Histogram) and isinstance(q, Histogram):
        if p.edges.shape != q.edges.shape or not np.array_equal(p.edges, q.edges):
            raise MetricError("histograms use different binning")
        p, q = p.mass, q.mass
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    if p.shape != q.shape:
        raise MetricError("histograms use different binning")
    if p.sum() <= 0 or q.sum() <= 0:
        raise MetricError("empty histogram")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def _lane_of(states: np.ndarray, graph: LaneGraph) -> np.ndarray:
    j, _ = nearest_segments(states[None], MapBatch.from_graphs([graph]))
    return graph.segment_arrays()["lane"][j[0]]


def track_samples(track: Track, feature: str) -> np.ndarray:
    """Per-(agent, tick) samples of one feature for the counted agents."""
    if feature not in FEATURES:
        raise MetricError(f"unknown feature {feature!r}")
    T = len(track.actions)
    agents = np.flatnonzero(track.learner)
    if feature == "acceleration":
        return track.actions[:, agents, 0].ravel()
    if feature == "speed":
        return track.states[1:T + 1, agents, 3].ravel()
    if track.spec is None:
        raise MetricError(f"{feature} needs the scenario map")
    graph = track.spec.graph
    out = []
    present = np.ones(track.states.shape[1], bool)
    for t in range(1, T + 1):
        st = track.states[t]
        lanes = _lane_of(st, graph)
        for i in agents:
            if feature == "lateral_deviation":
                _, lat = project_points(st[i, :2], graph.lanes[lanes[i]])
                out.append(lat[0])
            else:
                lead = lead_vehicle(i, st, track.spec.dims, present, graph, int(lanes[i]), LEAD_RANGE)
                if lead is not None:
                    out.append(lead[0])
    return np.asarray(out, float)


def feature_histogram(trajs, feature: str, edges=None) -> Histogram:
    if feature not in FEATURES:
        raise MetricError(f"unknown feature {feature!r}")
    edges = DEFAULT_EDGES[feature] if edges is None else np.asarray(edges, float)
    samples = np.concatenate([track_samples(t, feature) for t in _tracks(trajs)] or [np.zeros(0)])
    if len(samples) == 0:
        raise MetricError(f"no samples for feature {feature}")
    return Histogram.from_samples(samples, edges)


# ------------------------------------------------------------- infractions

def infraction_counts(tracks) -> np.ndarray:
    """Per-snippet ``(colliding learners, offroad learners, learners)``."""
    rows = []
    for t in _tracks(tracks):
        if t.collision is None:
            raise MetricError("track carries no infraction flags")
        L = t.learner
        rows.append([np.sum(t.collision.any(0) & L), np.sum(t.offroad.any(0) & L), np.sum(L)])
    return np.asarray(rows, float)


def infraction_rate(trajs):
    """(collision %, off-road %) over learner-controlled agents; heroes excluded."""
    c = infraction_counts(trajs)
    if len(c) == 0:
        raise MetricError("no trajectories")
    n = c[:, 2].sum()
    if n == 0:
        return 0.0, 0.0
    return 100.0 * c[:, 0].sum() / n, 100.0 * c[:, 1].sum() / n


# ---------------------------------------------------------------- bootstrap

class BootstrapCI(NamedTuple):
    mean: float
    half_width: float
    low: float
    high: float


def ratio_of_sums(rows: np.ndarray) -> float:
    den = rows[:, 1].sum()
    return float(rows[:, 0].sum() / den) if den > 0 else 0.0


def bootstrap_ci(values, n_resamples: int = 1000, rng=None, level: float = 0.95,
                 statistic=None) -> BootstrapCI:
    """Percentile bootstrap over snippets.

    ``values`` holds one entry (or row) per snippet; ``statistic`` maps a
    resampled array to a number (default: mean of the entries).
    """
    vals = np.asarray(values, float)
    if len(vals) < 2:
        raise MetricError("bootstrap needs at least two snippets")
    if n_resamples < 100:
        raise MetricError("n_resamples must be at least 100")
    stat = (lambda v: float(np.mean(v))) if statistic is None else statistic
    rng = np.random.default_rng(0) if rng is None else rng
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    point = stat(vals)
    idx = rng.integers(len(vals), size=(n_resamples, len(vals)))
    boots = np.array([stat(vals[k]) for k in idx])
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(boots, [a, 1.0 - a])
    return BootstrapCI(point, float(hi - lo) / 2.0, float(lo), float(hi))


# ---------------------------------------------------------------- reports

@dataclass
class MetricReport:
    rows: dict = field(default_factory=dict)  # metric -> BootstrapCI

    def add(self, name: str, ci: BootstrapCI):
        self.rows[name] = ci

    def __getitem__(self, name) -> BootstrapCI:
        return self.rows[name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "mean", "ci_low", "ci_high"])
        for name in sorted(self.rows):
            ci = self.rows[name]
            w.writerow([name, repr(float(ci.mean)), repr(float(ci.low)), repr(float(ci.high))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rep = cls()
        for r in csv.DictReader(io.StringIO(text)):
            m, lo, hi = float(r["mean"]), float(r["ci_low"]), float(r["ci_high"])
            rep.add(r["metric"], BootstrapCI(m, (hi - lo) / 2.0, lo, hi))
        return rep


def reconstruction_rows(sim_tracks: Sequence[Track], gt_tracks: Sequence[Track], horizon_s: float = 5.0):
    """Per-snippet mean FDE, ATE and CTE over counted agents."""
    rows = []
    for s, g in zip(sim_tracks, gt_tracks):
        keep = g.learner
        f = fde(s, g, horizon_s)[keep]
        a, c = ate_cte(s, g, horizon_s)
        rows.append([f.mean(), a[keep].mean(), c[keep].mean()])
    return np.asarray(rows)


def _jsd_ci(sim_tracks, gt_tracks, feature, n_resamples, rng, level):
    edges = DEFAULT_EDGES[feature]
    s_samples = [track_samples(t, feature) for t in sim_tracks]
    g_samples = [track_samples(t, feature) for t in gt_tracks]

    def stat(idx):
        idx = idx.astype(int)
        a = np.concatenate([s_samples[i] for i in idx])
        b = np.concatenate([g_samples[i] for i in idx])
        if len(a) == 0 or len(b) == 0:
            return 0.0
        return jsd(Histogram.from_samples(a, edges), Histogram.from_samples(b, edges))

    return bootstrap_ci(np.arange(len(sim_tracks)), n_resamples, rng, level, stat)


def evaluate(sim, gt=None, n_resamples: int = 1000, seed: int = 0, level: float = 0.95,
             horizon_s: float = 5.0) -> MetricReport:
    """Metric report over snippets. Reconstruction and JSD rows need ``gt``."""
    rng = np.random.default_rng(seed)
    sim_tracks = _tracks(sim)
    rep = MetricReport()
    if gt is not None:
        gt_tracks = _tracks(gt)
        if len(gt_tracks) != len(sim_tracks):
            raise MetricError("simulated and ground-truth snippet counts differ")
        rec = reconstruction_rows(sim_tracks, gt_tracks, horizon_s)
        for k, name in enumerate(("fde", "ate", "cte")):
            rep.add(name, bootstrap_ci(rec[:, k], n_resamples, rng, level))
        for feat in FEATURES:
            rep.add(f"jsd_{feat}", _jsd_ci(sim_tracks, gt_tracks, feat, n_resamples, rng, level))
    if all(t.collision is not None for t in sim_tracks):
        c = infraction_counts(sim_tracks)
        for k, name in ((0, "collision_pct"), (1, "offroad_pct")):
            ci = bootstrap_ci(c[:, [k, 2]], n_resamples, rng, level, ratio_of_sums)
            rep.add(name, BootstrapCI(100 * ci.mean, 100 * ci.half_width, 100 * ci.low, 100 * ci.high))
    return rep


def histogram_csv(h: Histogram) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_left", "bin_right", "mass"])
    for lo, hi, m in zip(h.edges[:-1], h.edges[1:], h.mass):
        w.writerow([repr(float(lo)), repr(float(hi)), repr(float(m))])
    return buf.getvalue()
