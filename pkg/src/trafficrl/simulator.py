"""Closed-loop simulation: policy mixture, infractions, rewards and termination."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .dynamics import step_taped
from .features import feature_dim, nearest_segments, scene_features
from .geometry import boxes_intersect_polygons, sat_overlap_matrix
from .policy import ParameterSet, log_prob, policy_forward, sample_action
from .scenario import DEFAULT_DIMS, ScenarioSpec, hero_step, oracle_actions
from .scene import MapBatch, SceneState

SHAPING_C = 30.0
TERMINATIONS = ("scenario", "agent", "none")
REWARDS = ("sparse", "shaped")
SOURCES = np.array(["pad", "learner", "hero", "oracle"])


class SimulationError(ValueError):
    pass


def batch_scenes(specs: Sequence[ScenarioSpec]) -> SceneState:
    """Stack scenarios into one padded :class:`SceneState`."""
    B = len(specs)
    A = max(s.n_agents for s in specs)
    H = specs[0].history.shape[1] - 1
    hist = np.zeros((B, A, H + 1, 4))
    # padding slots sit far away from everything, at rest
    hist[..., 0] = -1e4 - 100.0 * np.arange(A)[None, :, None]
    dims = np.tile(np.asarray(DEFAULT_DIMS), (B, A, 1))
    present = np.zeros((B, A), bool)
    hero = np.zeros((B, A), bool)
    for b, s in enumerate(specs):
        if s.history.shape[1] != H + 1:
            raise SimulationError("all scenarios in a batch need the same history length")
        n = s.n_agents
        hist[b, :n] = s.history
        dims[b, :n] = s.dims
        present[b, :n] = True
        hero[b, :n] = s.hero_flags
    maps = MapBatch.from_graphs([s.graph for s in specs])
    return SceneState(hist[:, :, -1].copy(), hist, dims, present, hero, present.copy(),
                      np.zeros((B, A), bool), maps)


def shaped_reward(agent_state, speed_limit: float, c: float = SHAPING_C):
    """Speed-tracking bonus ``0.5 (C - delta) / C`` and whether ``delta >= C`` ends the episode."""
    if not np.all(np.asarray(speed_limit) > 0):
        raise SimulationError("speed limit must be positive")
    v = agent_state.v if hasattr(agent_state, "v") else np.asarray(agent_state)[..., 3]
    delta = np.abs(v - speed_limit)
    return 0.5 * (c - delta) / c, delta >= c


def infraction_flags(scene: SceneState, active: np.ndarray):
    """Per-agent (collision, offroad) flags among ``active`` agents."""
    s = scene.values()
    c = scene.box_centers()
    hl, hw = 0.5 * scene.dims[..., 1], 0.5 * scene.dims[..., 2]
    pair = sat_overlap_matrix(c, s[..., 2], hl, hw)
    pair &= active[:, :, None] & active[:, None, :]
    A = pair.shape[-1]
    pair &= ~np.eye(A, dtype=bool)
    collision = pair.any(-1)
    offroad = ~boxes_intersect_polygons(scene.corners(), scene.maps.polygon) & active
    return collision, offroad


def step_scene(scene: SceneState, joint_action, reward: str = "sparse"):
    """Advance every alive agent one tick.

    Returns ``(next_scene, rewards, collision, offroad, shaped_stop)``. Agents that
    are padding or no longer alive keep their state. An infracting agent is
    penalised ``-1`` the first time only.
    """
    av = ad.value(joint_action)
    if av.shape != scene.present.shape + (2,):
        raise SimulationError(f"expected joint action of shape {scene.present.shape + (2,)}, got {av.shape}")
    active = scene.present & scene.alive
    act = ad.mul(joint_action, active[..., None].astype(float))
    nxt = step_taped(scene.states, act, scene.dims[..., 0])
    nxt = ad.where(active[..., None], nxt, scene.states)
    new = scene.advance(nxt)
    collision, offroad = infraction_flags(new, active)
    hit = (collision | offroad) & active
    rewards = np.where(hit & ~scene.infracted, -1.0, 0.0)
    new.infracted = scene.infracted | hit
    stop = np.zeros_like(active)
    if reward == "shaped":
        sv = new.values()
        j, _ = nearest_segments(sv, new.maps)
        limit = np.take_along_axis(new.maps.seg_limit, j, axis=1)
        bonus, stop = shaped_reward(sv, limit)
        learner = active & ~scene.hero
        rewards = rewards + np.where(learner, bonus, 0.0)
        stop = stop & learner
    elif reward != "sparse":
        raise SimulationError(f"unknown reward mode {reward!r}")
    return new, rewards, collision & active, offroad & active, stop


@dataclass
class PolicyMixture:
    """Heroes follow their scripts; every other agent follows ``controller``.

    ``controller`` is ``"policy"`` (the learner, with ``params``) or ``"oracle"``.
    ``theta`` optionally replaces ``params.values`` by a tape variable.
    """

    params: ParameterSet | None = None
    controller: str = "policy"
    theta: object = None


@dataclass
class Trajectory:
    """Batched rollout record; ``length[b]`` actions were taken in scene ``b``.

    Entries past a scene's length are NaN (states, actions) or 0 (rewards).
    """

    states: np.ndarray      # (B, T+1, A, 4)
    actions: np.ndarray     # (B, T, A, 2)
    rewards: np.ndarray     # (B, T, A)
    collision: np.ndarray   # (B, T, A) flags at state t+1
    offroad: np.ndarray     # (B, T, A)
    alive: np.ndarray       # (B, T+1, A)
    log_probs: np.ndarray   # (B, T, A), learner-sampled agents only
    source: np.ndarray      # (B, A) action source tag
    present: np.ndarray     # (B, A)
    length: np.ndarray      # (B,)
    terminated: np.ndarray  # (B,) ended early by an infraction or shaping stop
    specs: list = field(default_factory=list)
    features: np.ndarray | None = None  # (B, T+1, A, F)
    tape_states: list | None = None     # per-tick taped states when differentiating

    @property
    def batch(self) -> int:
        return len(self.length)

    @property
    def horizon(self) -> int:
        return self.actions.shape[1]

    @property
    def termination_tick(self):
        return [int(n) if t else None for n, t in zip(self.length, self.terminated)]

    @property
    def valid(self) -> np.ndarray:
        return np.arange(self.horizon)[None, :] < self.length[:, None]

    def scene(self, b: int) -> "Trajectory":
        """Single-scene record truncated at its length, without padding slots."""
        n = int(self.length[b])
        k = int(self.present[b].sum())
        return Trajectory(
            self.states[b:b + 1, :n + 1, :k], self.actions[b:b + 1, :n, :k], self.rewards[b:b + 1, :n, :k],
            self.collision[b:b + 1, :n, :k], self.offroad[b:b + 1, :n, :k], self.alive[b:b + 1, :n + 1, :k],
            self.log_probs[b:b + 1, :n, :k], self.source[b:b + 1, :k], self.present[b:b + 1, :k],
            self.length[b:b + 1], self.terminated[b:b + 1], self.specs[b:b + 1],
            None if self.features is None else self.features[b:b + 1, :n + 1, :k])

    def discounted_returns(self, gamma: float) -> np.ndarray:
        disc = gamma ** np.arange(self.horizon)
        return np.einsum("bta,t->ba", self.rewards, disc)


def _hero_actions(scene: SceneState, specs, tick: int):
    sv = scene.values()
    acts = np.zeros(sv.shape[:2] + (2,))
    trig = scene.triggered.copy()
    live = scene.present & scene.alive
    for b, i in zip(*np.nonzero(scene.hero & live)):
        a, trig[b, i] = hero_step(i, sv[b], scene.dims[b], live[b], scene.maps.graphs[b],
                                  specs[b].hero_params[int(i)], bool(trig[b, i]), tick)
        acts[b, i] = a
    return acts, trig


def _oracle_actions(scene: SceneState, specs):
    sv = scene.values()
    acts = np.zeros(sv.shape[:2] + (2,))
    live = scene.present & scene.alive
    for b, spec in enumerate(specs):
        n = spec.n_agents
        act = live[b, :n] & ~scene.hero[b, :n]
        if act.any():
            acts[b, :n] = oracle_actions(sv[b, :n], scene.dims[b, :n], live[b, :n], scene.maps.graphs[b],
                                         spec.routes, spec.desired_speed, active=act)
    return acts


def rollout_batch(mixture: PolicyMixture, specs: Sequence[ScenarioSpec], T: int, mode: str = "mean",
                  rng=None, termination: str = "scenario", reward: str = "sparse",
                  record_features: bool = False, require_log: bool = False) -> Trajectory:
    """Roll ``T`` ticks of every scenario under the hero / learner mixture.

    ``termination``: ``"scenario"`` ends a scenario at its first infraction,
    ``"agent"`` removes infracting agents, ``"none"`` records and continues.
    """
    if T < 1:
        raise SimulationError("T must be at least 1")
    if termination not in TERMINATIONS:
        raise SimulationError(f"unknown termination mode {termination!r}")
    if require_log:
        for s in specs:
            if s.expert_log is None or s.expert_log.ticks < T:
                raise SimulationError(f"rollout of {T} ticks exceeds the expert log of scenario {s.seed}")
    specs = list(specs)
    scene = batch_scenes(specs)
    B, A = scene.present.shape
    taped = ad.is_var(mixture.theta)
    states = np.full((B, T + 1, A, 4), np.nan)
    actions = np.full((B, T, A, 2), np.nan)
    rewards = np.zeros((B, T, A))
    coll = np.zeros((B, T, A), bool)
    off = np.zeros((B, T, A), bool)
    alive = np.zeros((B, T + 1, A), bool)
    logp = np.zeros((B, T, A))
    feats = None
    if record_features:
        feats = np.full((B, T + 1, A, feature_dim(scene.horizon)), np.nan)
    length = np.full(B, T)
    terminated = np.zeros(B, bool)
    running = np.ones(B, bool)
    source = np.where(scene.hero, "hero", "learner" if mixture.controller == "policy" else "oracle")
    source = np.where(scene.present, source, "pad")
    tape_states = [scene.states] if taped else None

    states[:, 0] = scene.values()
    alive[:, 0] = scene.alive
    for t in range(T):
        f = None
        if mixture.controller == "policy" or record_features:
            f = scene_features(scene)
            if record_features:
                feats[running, t] = ad.value(f)[running]
        if mixture.controller == "policy":
            dist = policy_forward(mixture.params, f, mixture.theta)
            sampled = sample_action(dist, rng, mode)
            learner_act = sampled.action
            lp = ad.value(log_prob(dist, ad.value(learner_act)))
        elif mixture.controller == "oracle":
            learner_act = _oracle_actions(scene, specs)
            lp = np.zeros((B, A))
        else:
            raise SimulationError(f"unknown controller {mixture.controller!r}")
        hero_act, trig = _hero_actions(scene, specs, t)
        joint = ad.where(scene.hero[..., None], hero_act, learner_act)
        scene.triggered = trig
        prev_alive = scene.alive & scene.present
        nxt, r, c, o, stop = step_scene(scene, joint, reward)

        r_rec = np.where(running[:, None], r, 0.0)
        actions[running, t] = np.where(prev_alive[..., None], ad.value(joint), 0.0)[running]
        rewards[:, t] = r_rec
        coll[running, t] = c[running]
        off[running, t] = o[running]
        logp[running, t] = np.where(prev_alive & ~scene.hero, lp, 0.0)[running]
        states[running, t + 1] = nxt.values()[running]

        hit = c | o
        new_alive = nxt.alive.copy()
        if termination == "agent":
            new_alive &= ~hit
        ended = np.zeros(B, bool)
        if termination == "scenario":
            ended = hit.any(-1) | stop.any(-1)
        elif reward == "shaped":
            ended = stop.any(-1)
        ended &= running
        length[ended] = t + 1
        terminated |= ended
        new_alive[ended] = False
        nxt.alive = new_alive
        alive[running, t + 1] = new_alive[running] | (ended[:, None] & prev_alive)[running]
        running &= ~ended
        scene = nxt
        if taped:
            tape_states.append(scene.states)
        if not running.any():
            break
    if record_features:
        # terminal states (frozen since their scene ended) get features too
        feats[np.arange(B), length] = ad.value(scene_features(scene.detached()))
    return Trajectory(states, actions, rewards, coll, off, alive, logp, source, scene.present.copy(),
                      length, terminated, specs, feats, tape_states)


def rollout(mixture: PolicyMixture, spec: ScenarioSpec, T: int, mode: str = "mean", rng=None,
            termination: str = "scenario", reward: str = "sparse") -> Trajectory:
    """Single-scenario rollout, truncated at its termination tick."""
    return rollout_batch(mixture, [spec], T, mode, rng, termination, reward).scene(0)


# ------------------------------------------------------------------ log files

LOG_COLUMNS = ["scenario", "tick", "agent_id", "x", "y", "theta", "v", "accel", "steer",
               "reward", "alive", "source_tag"]


def trajectory_rows(traj: Trajectory, scenario_ids=None):
    for b in range(traj.batch):
        one = traj.scene(b)
        sid = b if scenario_ids is None else scenario_ids[b]
        n = int(one.length[0])
        for t in range(n + 1):
            for i in range(one.states.shape[2]):
                x, y, th, v = one.states[0, t, i]
                if t < n:
                    acc, st = one.actions[0, t, i]
                    rew = one.rewards[0, t, i]
                    cells = [repr(float(acc)), repr(float(st)), repr(float(rew))]
                else:
                    cells = ["", "", ""]
                yield [sid, t, i, repr(float(x)), repr(float(y)), repr(float(th)), repr(float(v)),
                       *cells, int(one.alive[0, t, i]), one.source[0, i]]


def trajectory_csv(traj: Trajectory, scenario_ids=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    w.writerows(trajectory_rows(traj, scenario_ids))
    return buf.getvalue()


@dataclass
class LoggedTrajectory:
    """One scenario read back from a trajectory log."""

    scenario: str
    states: np.ndarray   # (T+1, N, 4)
    actions: np.ndarray  # (T, N, 2)
    rewards: np.ndarray  # (T, N)
    alive: np.ndarray    # (T+1, N)
    source: np.ndarray   # (N,)


def read_trajectory_csv(text: str) -> list[LoggedTrajectory]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and list(rows[0].keys()) != LOG_COLUMNS:
        raise SimulationError("trajectory log has unexpected columns")
    out, order = {}, []
    for r in rows:
        sid = r["scenario"]
        if sid not in out:
            out[sid] = []
            order.append(sid)
        out[sid].append(r)
    logs = []
    for sid in order:
        rs = out[sid]
        T = max(int(r["tick"]) for r in rs)
        N = max(int(r["agent_id"]) for r in rs) + 1
        st = np.zeros((T + 1, N, 4))
        ac = np.zeros((T, N, 2))
        rw = np.zeros((T, N))
        al = np.zeros((T + 1, N), bool)
        src = np.empty(N, dtype=object)
        for r in rs:
            t, i = int(r["tick"]), int(r["agent_id"])
            st[t, i] = [float(r[k]) for k in ("x", "y", "theta", "v")]
            al[t, i] = r["alive"] == "1"
            src[i] = r["source_tag"]
            if t < T:
                ac[t, i] = [float(r["accel"]), float(r["steer"])]
                rw[t, i] = float(r["reward"])
        logs.append(LoggedTrajectory(sid, st, ac, rw, al, src.astype(str)))
    return logs
