"""Scenario generation: nominal oracle-driven logs, long-tail families and hero scripts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .dynamics import DT, MAX_ACCEL, MAX_STEER, AgentAction, step_arrays
from .geometry import (LaneGraph, box_corners, boxes_intersect_polygon, build_lane_graph,
                       points_in_polygon, project_points, sat_overlap_matrix)
from .maps import map_variant, n_lanes_main

HISTORY = 10
LOG_TICKS = 20
MAX_RETRIES = 100
FAMILIES = ("cut_in", "hard_brake", "merge")
DEFAULT_DIMS = (2.8, 4.6, 1.9)  # wheelbase, box length, box width
MERGE_X = 200.0
TAPER_START = 170.0


class ScenarioError(ValueError):
    pass


@lru_cache(maxsize=None)
def lane_graph(variant: int) -> LaneGraph:
    return build_lane_graph(map_variant(variant))


# ------------------------------------------------------------------ data types

@dataclass(frozen=True)
class IDMParams:
    a_max: float = 1.5
    b: float = 2.0
    s0: float = 2.0
    headway: float = 1.5
    delta: float = 4.0


@dataclass(frozen=True)
class LogicalScenario:
    family: str
    parameter_ranges: dict
    hero_count: int = 1
    trigger: str = "distance"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ScenarioError(f"unknown family {self.family!r}")
        if self.hero_count < 1:
            raise ScenarioError("hero_count must be at least 1")
        if self.trigger not in ("distance", "ttc"):
            raise ScenarioError(f"unknown trigger type {self.trigger!r}")
        for name, (lo, hi) in self.parameter_ranges.items():
            if not lo <= hi:
                raise ScenarioError(f"empty range for {name}: [{lo}, {hi}]")


INTEGER_PARAMS = ("map_variant", "background_agents")


def default_logical(family: str) -> LogicalScenario:
    common = {"aggressiveness": (0.3, 1.0), "trigger_ttc": (1.5, 3.0), "background_agents": (1, 2)}
    if family == "cut_in":
        r = {"trigger_distance": (6.0, 18.0), "hero_speed": (17.0, 23.0), "target_speed": (24.0, 28.0),
             "initial_gap": (20.0, 40.0), "map_variant": (0, 1)}
        return LogicalScenario("cut_in", {**common, **r}, trigger="distance")
    if family == "hard_brake":
        r = {"trigger_distance": (10.0, 25.0), "hero_speed": (20.0, 25.0), "target_speed": (23.0, 28.0),
             "initial_gap": (14.0, 30.0), "map_variant": (0, 1)}
        return LogicalScenario("hard_brake", {**common, **r}, trigger="distance")
    if family == "merge":
        r = {"trigger_distance": (5.0, 20.0), "hero_speed": (18.0, 24.0), "target_speed": (22.0, 27.0),
             "initial_gap": (-4.0, 8.0), "map_variant": (3, 3)}
        return LogicalScenario("merge", {**common, **r}, trigger="distance")
    raise ScenarioError(f"unknown family {family!r}")


@dataclass
class ExpertTrajectory:
    states: np.ndarray   # (T+1, N, 4), states[0] is the initial state
    actions: np.ndarray  # (T, N, 2)
    dt: float = DT

    @property
    def ticks(self) -> int:
        return len(self.actions)


@dataclass
class ScenarioSpec:
    map_variant: int
    history: np.ndarray          # (N, H+1, 4); history[:, -1] is the initial state
    dims: np.ndarray             # (N, 3)
    hero_flags: np.ndarray       # (N,)
    hero_params: dict            # agent index -> concrete script parameters
    routes: np.ndarray           # (N,) lane index followed by oracle / hero
    desired_speed: np.ndarray    # (N,)
    expert_log: ExpertTrajectory | None
    seed: int
    family: str = "nominal"
    theta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.history = np.asarray(self.history, float)
        self.dims = np.asarray(self.dims, float)
        self.hero_flags = np.asarray(self.hero_flags, bool)
        self.routes = np.asarray(self.routes, int)
        self.desired_speed = np.asarray(self.desired_speed, float)
        self.hero_params = {int(k): v for k, v in self.hero_params.items()}
        if set(self.hero_params) != set(np.flatnonzero(self.hero_flags).tolist()):
            raise ScenarioError("hero_params must be given for exactly the hero agents")
        if (self.expert_log is not None) != (self.family == "nominal"):
            raise ScenarioError("nominal scenarios carry an expert log, long-tail ones do not")

    @property
    def graph(self) -> LaneGraph:
        return lane_graph(self.map_variant)

    @property
    def n_agents(self) -> int:
        return len(self.dims)

    @property
    def initial_states(self) -> np.ndarray:
        return self.history[:, -1]

    @property
    def is_nominal(self) -> bool:
        return self.expert_log is not None


# ----------------------------------------------------------- oracle pieces

def idm_accel(v, v0, gap=None, dv=0.0, p: IDMParams = IDMParams()):
    """IDM acceleration; ``gap=None`` means free road."""
    free = 1.0 - (v / v0) ** p.delta
    if gap is None:
        return p.a_max * free
    s_star = p.s0 + max(0.0, v * p.headway + v * dv / (2.0 * math.sqrt(p.a_max * p.b)))
    return p.a_max * (free - (s_star / max(gap, 0.1)) ** 2)


def _lane_data(graph: LaneGraph, lane: int):
    line = graph.lanes[lane]
    seg = np.linalg.norm(np.diff(line, axis=0), axis=1)
    return line, np.concatenate([[0.0], np.cumsum(seg)])


def _point_ahead(line, cum, s):
    """Point at arclength ``s``, extrapolating past the last vertex."""
    if s >= cum[-1]:
        d = line[-1] - line[-2]
        return line[-1] + (s - cum[-1]) * d / np.linalg.norm(d)
    x = np.interp(s, cum, line[:, 0])
    y = np.interp(s, cum, line[:, 1])
    return np.array([x, y])


def pure_pursuit(state, wheelbase: float, line, cum, s_rear: float, lookahead: float) -> float:
    tgt = _point_ahead(line, cum, s_rear + lookahead)
    dx, dy = tgt[0] - state[0], tgt[1] - state[1]
    ld = math.hypot(dx, dy)
    if ld < 1e-6:
        return 0.0
    alpha = math.atan2(dy, dx) - state[2]
    return math.atan(2.0 * wheelbase * math.sin(alpha) / ld)


def _centers(states, dims):
    off = 0.5 * dims[:, 0]
    return np.stack([states[:, 0] + off * np.cos(states[:, 2]), states[:, 1] + off * np.sin(states[:, 2])], 1)


def lead_vehicle(i: int, states, dims, present, graph: LaneGraph, lane: int, horizon: float = 100.0):
    """Bumper gap and closing speed to the nearest agent ahead on ``lane`` (or ``None``)."""
    line = graph.lanes[lane]
    s, lat = project_points(_centers(states, dims), line)
    band = 0.5 * graph.lane_widths[lane] + 0.4
    best = None
    for j in range(len(states)):
        if j == i or not present[j] or abs(lat[j]) > band or s[j] <= s[i] or s[j] - s[i] > horizon:
            continue
        gap = s[j] - s[i] - 0.5 * (dims[i, 1] + dims[j, 1])
        if best is None or gap < best[0]:
            best = (gap, states[i, 3] - states[j, 3], j)
    return best


def pursuit_lookahead(v: float) -> float:
    return max(8.0, 1.0 * v)


def oracle_actions(states, dims, present, graph: LaneGraph, routes, desired_speed,
                   idm: IDMParams = IDMParams(), active=None) -> np.ndarray:
    """IDM longitudinal + pure-pursuit lateral control for every active agent."""
    n = len(states)
    out = np.zeros((n, 2))
    active = present if active is None else active
    for i in np.flatnonzero(active):
        lane = int(routes[i])
        line, cum = _lane_data(graph, lane)
        lead = lead_vehicle(i, states, dims, present, graph, lane)
        v = states[i, 3]
        u = idm_accel(v, desired_speed[i], None if lead is None else lead[0],
                      0.0 if lead is None else lead[1], idm)
        s_rear, _ = project_points(states[i, :2], line)
        phi = pure_pursuit(states[i], dims[i, 0], line, cum, float(s_rear[0]), pursuit_lookahead(v))
        out[i] = (u, phi)
    out[:, 0] = np.clip(out[:, 0], -MAX_ACCEL, MAX_ACCEL)
    out[:, 1] = np.clip(out[:, 1], -MAX_STEER, MAX_STEER)
    return out


def expert_oracle_action(agent_index: int, scene, routes=None, desired_speed=None,
                         idm: IDMParams = IDMParams(), batch_index: int = 0) -> AgentAction:
    """Oracle action for one agent of a scene; defaults to the nearest lane and its speed limit."""
    from .features import nearest_segments
    view = scene.scene(batch_index)
    states = view.values()[0]
    graph = view.maps.graphs[0]
    if routes is None or desired_speed is None:
        j, _ = nearest_segments(view.values(), view.maps)
        seg = graph.segment_arrays()
        routes = seg["lane"][j[0]] if routes is None else routes
        desired_speed = seg["speed_limit"][j[0]] if desired_speed is None else desired_speed
    active = np.zeros(len(states), bool)
    active[agent_index] = True
    present = view.present[0] & view.alive[0]
    a = oracle_actions(states, view.dims[0], present, graph, routes, desired_speed, idm, active)
    return AgentAction(float(a[agent_index, 0]), float(a[agent_index, 1]))


# ---------------------------------------------------------------- hero scripts

def _bumper_gap(h: int, t: int, states, dims, line):
    s, _ = project_points(_centers(states[[h, t]], dims[[h, t]]), line)
    return s[0] - s[1] - 0.5 * (dims[h, 1] + dims[t, 1]), s[0] > s[1]


def hero_step(h: int, states, dims, present, graph: LaneGraph, params: dict, triggered: bool, tick: int = 0):
    """Scripted hero control. Returns ``((accel, steer), triggered)``; the trigger latches."""
    fam = params["family"]
    v = states[h, 3]
    aggr = params["aggressiveness"]
    target = params["target"]
    goal = params["goal_lane"]
    if not triggered and present[target]:
        gline, _ = _lane_data(graph, goal)
        gap, ahead = _bumper_gap(h, target, states, dims, gline)
        if params["trigger"] == "ttc":
            closing = states[target, 3] - v
            hit = ahead and closing > 0 and gap / closing < params["trigger_ttc"]
        elif fam == "merge":
            hit = abs(gap) < params["trigger_distance"]
        else:
            hit = ahead and gap < params["trigger_distance"]
        triggered = bool(hit)

    lane = goal if triggered and fam in ("cut_in", "merge") else params["lane"]
    line, cum = _lane_data(graph, lane)
    s_rear, lat = project_points(states[h, :2], line)
    if abs(lat[0]) > 2.0 * graph.lane_widths[lane] + 0.5 * graph.lane_widths[params["lane"]]:
        return np.zeros(2), triggered  # lost the lane reference
    if triggered and fam == "hard_brake":
        u = -(2.0 + 4.0 * aggr) if v > 0 else 0.0
    else:
        u = float(np.clip(params["cruise_speed"] - v, -MAX_ACCEL, MAX_ACCEL))
    ld = max(5.0, v * (2.0 - 1.5 * aggr)) if triggered and fam != "hard_brake" else pursuit_lookahead(v)
    phi = float(np.clip(pure_pursuit(states[h], dims[h, 0], line, cum, float(s_rear[0]), ld), -MAX_STEER, MAX_STEER))
    return np.array([u, phi]), triggered


def hero_action(hero_index: int, scene, params: dict, tick: int, batch_index: int = 0) -> AgentAction:
    view = scene.scene(batch_index)
    if not view.hero[0, hero_index]:
        raise ScenarioError(f"agent {hero_index} is not a hero")
    a, _ = hero_step(hero_index, view.values()[0], view.dims[0], view.present[0] & view.alive[0],
                     view.maps.graphs[0], params, bool(view.triggered[0, hero_index]), tick)
    return AgentAction(float(a[0]), float(a[1]))


# ------------------------------------------------------------- placement

def _pose(graph: LaneGraph, lane: int, s: float):
    line, cum = _lane_data(graph, lane)
    p = _point_ahead(line, cum, s)
    q = _point_ahead(line, cum, s + 0.5)
    r = _point_ahead(line, cum, max(s - 0.5, 0.0))
    return p, math.atan2(q[1] - r[1], q[0] - r[0])


def _backfill(state, horizon: int) -> np.ndarray:
    """Constant-velocity history ending at ``state``."""
    k = np.arange(-horizon, 1) * DT
    x, y, th, v = state
    return np.stack([x + v * math.cos(th) * k, y + v * math.sin(th) * k,
                     np.full_like(k, th), np.full_like(k, v)], 1)


def placement_ok(states, dims, graph: LaneGraph, margin: float = 4.0) -> bool:
    """Boxes pairwise clear by ``margin`` metres along their length and centred on the road."""
    c = _centers(states, dims)
    if not points_in_polygon(c, graph.road_polygon).all():
        return False
    m = sat_overlap_matrix(c, states[:, 2], 0.5 * dims[:, 1] + margin, 0.5 * dims[:, 2])
    np.fill_diagonal(m, False)
    return not m.any()


def infractions(states, dims, present, graph: LaneGraph):
    """Per-agent (collision, offroad) flags for one scene."""
    c = _centers(states, dims)
    m = sat_overlap_matrix(c, states[:, 2], 0.5 * dims[:, 1], 0.5 * dims[:, 2])
    m &= present[:, None] & present[None, :]
    np.fill_diagonal(m, False)
    corners = box_corners(c, states[:, 2], 0.5 * dims[:, 1], 0.5 * dims[:, 2])
    off = ~boxes_intersect_polygon(corners, graph.road_polygon) & present
    return m.any(axis=1), off


def _draw_theta(logical: LogicalScenario, rng) -> dict:
    theta = {}
    for name in sorted(logical.parameter_ranges):
        lo, hi = logical.parameter_ranges[name]
        if name in INTEGER_PARAMS:
            theta[name] = int(rng.integers(int(lo), int(hi) + 1))
        else:
            theta[name] = float(rng.uniform(lo, hi))
    return theta


def _longtail_layout(logical: LogicalScenario, theta: dict, rng):
    """Lanes, arclengths and speeds of hero(es), target and background learners."""
    fam = logical.family
    graph = lane_graph(theta["map_variant"])
    n_main = n_lanes_main(map_variant(theta["map_variant"]))
    v_t, v_h = theta["target_speed"], theta["hero_speed"]
    length = 0.5 * (DEFAULT_DIMS[1] * 2)
    agents = []  # (lane, s, v, is_hero)
    if fam == "merge":
        t_arrive = rng.uniform(2.5, 4.0)
        s_t = MERGE_X - v_t * t_arrive
        tl, hl = 0, len(graph.lanes) - 1
        s_h = MERGE_X + theta["initial_gap"] - v_h * t_arrive
        heroes = [(hl, s_h - 30.0 * k) for k in range(logical.hero_count)]
        if any(s > TAPER_START - 5.0 for _, s in heroes):
            return None
    else:
        tl = int(rng.integers(n_main))
        s_t = float(rng.uniform(30.0, 80.0))
        if fam == "cut_in":
            sides = [l for l in (tl - 1, tl + 1) if 0 <= l < n_main]
            hl = int(sides[rng.integers(len(sides))])
        else:
            hl = tl
        heroes = [(hl, s_t + theta["initial_gap"] + length + 30.0 * k) for k in range(logical.hero_count)]
    agents.append((tl, s_t, v_t, False))
    for lane, s in heroes:
        agents.append((lane, s, v_h, True))
    for _ in range(theta.get("background_agents", 0)):
        lane = int(rng.integers(n_main))
        agents.append((lane, float(s_t + rng.uniform(-45.0, 60.0)), float(v_t * rng.uniform(0.9, 1.05)), False))
    return graph, tl, hl, agents


def sample_concrete_scenario(logical: LogicalScenario, rng_seed: int, horizon: int = HISTORY) -> ScenarioSpec:
    """Draw concrete parameters uniformly and place agents; pure function of ``(logical, seed)``."""
    rng = np.random.default_rng(rng_seed)
    for _ in range(MAX_RETRIES):
        theta = _draw_theta(logical, rng)
        layout = _longtail_layout(logical, theta, rng)
        if layout is None:
            continue
        graph, tl, hl, agents = layout
        states, routes, heroes = [], [], []
        for lane, s, v, is_hero in agents:
            p, th = _pose(graph, lane, s)
            states.append([p[0], p[1], th, v])
            routes.append(lane)
            heroes.append(is_hero)
        states = np.array(states)
        dims = np.tile(DEFAULT_DIMS, (len(states), 1))
        if not placement_ok(states, dims, graph):
            continue
        hero_params = {}
        for i in np.flatnonzero(heroes):
            hero_params[int(i)] = {
                "family": logical.family, "trigger": logical.trigger, "target": 0,
                "lane": int(routes[i]), "goal_lane": int(tl), "cruise_speed": float(states[i, 3]),
                **{k: theta[k] for k in ("aggressiveness", "trigger_distance", "trigger_ttc")},
            }
        history = np.stack([_backfill(s, horizon) for s in states])
        return ScenarioSpec(map_variant=theta["map_variant"], history=history, dims=dims,
                            hero_flags=np.array(heroes), hero_params=hero_params, routes=np.array(routes),
                            desired_speed=states[:, 3].copy(), expert_log=None, seed=int(rng_seed),
                            family=logical.family, theta=theta)
    raise ScenarioError(f"no valid {logical.family} placement after {MAX_RETRIES} attempts (seed {rng_seed})")


def sample_nominal_scenario(seed: int, horizon: int = HISTORY, log_ticks: int = LOG_TICKS,
                            n_agents=(3, 6), variants=(0, 1, 2, 3), idm: IDMParams = IDMParams()) -> ScenarioSpec:
    """Oracle-driven scenario: warm up for ``horizon`` ticks, then log ``log_ticks`` ticks."""
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RETRIES):
        variant = int(variants[rng.integers(len(variants))])
        graph = lane_graph(variant)
        n = int(rng.integers(n_agents[0], n_agents[1] + 1))
        lanes = rng.integers(len(graph.lanes), size=n)
        s = rng.uniform(10.0, 130.0, size=n)
        limit = np.array([graph.lane_speed_limits[l] for l in lanes])
        v = limit * rng.uniform(0.75, 1.0, size=n)
        v0 = limit * rng.uniform(0.85, 1.05, size=n)
        states = []
        for lane, si, vi in zip(lanes, s, v):
            p, th = _pose(graph, int(lane), float(si))
            states.append([p[0], p[1], th, vi])
        states = np.array(states)
        dims = np.tile(DEFAULT_DIMS, (n, 1))
        if not placement_ok(states, dims, graph, margin=6.0):
            continue
        present = np.ones(n, bool)
        traj, acts = [states], []
        ok = True
        for _ in range(horizon + log_ticks):
            a = oracle_actions(traj[-1], dims, present, graph, lanes, v0, idm)
            nxt, _ = step_arrays(traj[-1], a, dims[:, 0])
            col, off = infractions(nxt, dims, present, graph)
            if col.any() or off.any():
                ok = False
                break
            acts.append(a)
            traj.append(nxt)
        if not ok:
            continue
        traj = np.array(traj)
        history = np.transpose(traj[:horizon + 1], (1, 0, 2))
        log = ExpertTrajectory(traj[horizon:], np.array(acts[horizon:]))
        return ScenarioSpec(map_variant=variant, history=history, dims=dims, hero_flags=np.zeros(n, bool),
                            hero_params={}, routes=lanes, desired_speed=v0, expert_log=log,
                            seed=int(seed), family="nominal")
    raise ScenarioError(f"no valid nominal scenario after {MAX_RETRIES} attempts (seed {seed})")


def sample_initial_state(alpha: float, nominal_set, longtail_set, rng) -> ScenarioSpec:
    """Mixture draw: long-tail with probability ``alpha``, nominal otherwise."""
    if not 0.0 <= alpha <= 1.0:
        raise ScenarioError(f"alpha must lie in [0, 1], got {alpha}")
    use_tail = alpha == 1.0 or (alpha > 0.0 and rng.random() < alpha)
    pool = longtail_set if use_tail else nominal_set
    if not pool:
        raise ScenarioError("the selected scenario set is empty")
    return pool[int(rng.integers(len(pool)))]


# ------------------------------------------------------------ serialization

def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    return x


def spec_to_dict(spec: ScenarioSpec) -> dict:
    log_ = spec.expert_log
    return _plain({
        "map_variant": spec.map_variant, "history": spec.history, "dims": spec.dims,
        "hero_flags": spec.hero_flags, "hero_params": spec.hero_params, "routes": spec.routes,
        "desired_speed": spec.desired_speed, "seed": spec.seed, "family": spec.family, "theta": spec.theta,
        "expert_log": None if log_ is None else {"states": log_.states, "actions": log_.actions, "dt": log_.dt},
    })


def spec_from_dict(d: dict) -> ScenarioSpec:
    try:
        log_ = d["expert_log"]
        expert = None if log_ is None else ExpertTrajectory(
            np.asarray(log_["states"], float), np.asarray(log_["actions"], float), float(log_["dt"]))
        return ScenarioSpec(int(d["map_variant"]), np.asarray(d["history"], float), np.asarray(d["dims"], float),
                            np.asarray(d["hero_flags"], bool), d["hero_params"], np.asarray(d["routes"], int),
                            np.asarray(d["desired_speed"], float), expert, int(d["seed"]), d["family"],
                            dict(d["theta"]))
    except (KeyError, TypeError) as e:
        raise ScenarioError(f"malformed scenario record: {e}") from e
