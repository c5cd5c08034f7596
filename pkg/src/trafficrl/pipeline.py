"""Run configuration, seeded dataset generation, training and evaluation glue."""

from __future__ import annotations

import json
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import partial

import numpy as np

from .features import feature_dim
from .learning import TrainConfig, TrainState, train
from .metrics import MetricReport, Track, evaluate
from .policy import ParameterSet, init_policy, init_value
from .scenario import (FAMILIES, HISTORY, LOG_TICKS, ScenarioSpec, default_logical, infractions,
                       sample_concrete_scenario, sample_nominal_scenario)
from .simulator import LoggedTrajectory, PolicyMixture, Trajectory, rollout_batch

CONFIG_VERSION = 1
WORKERS_ENV = "TRAFFICRL_WORKERS"
DATASETS = ("nominal_train", "nominal_heldout", "longtail_train", "longtail_heldout", "longtail_ood")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    nominal_train: int = 50
    nominal_heldout: int = 15
    longtail_train: int = 20
    longtail_heldout: int = 20
    longtail_ood: int = 20
    train_families: tuple = ("cut_in", "hard_brake")
    heldout_family: str = "merge"
    nominal_variants: tuple = (0, 1, 3)
    history: int = HISTORY
    log_ticks: int = LOG_TICKS

    def __post_init__(self):
        self.train_families = tuple(self.train_families)
        self.nominal_variants = tuple(int(v) for v in self.nominal_variants)
        for fam in (*self.train_families, self.heldout_family):
            if fam not in FAMILIES:
                raise ConfigError(f"unknown scenario family {fam!r}")
        if self.heldout_family in self.train_families:
            raise ConfigError("the held-out family must not be a training family")
        for name in DATASETS:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


@dataclass
class EvalConfig:
    n_resamples: int = 1000
    level: float = 0.95
    horizon_s: float = 5.0
    nominal_ticks: int = LOG_TICKS
    longtail_ticks: int = 20
    action_mode: str = "mean"


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    version: int = CONFIG_VERSION

    def to_dict(self) -> dict:
        d = {"version": self.version, "seed": self.seed, "dataset": asdict(self.dataset),
             "train": self.train.to_dict(), "eval": asdict(self.eval)}
        for k in ("train_families", "nominal_variants"):
            d["dataset"][k] = list(d["dataset"][k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        if d.get("version") != CONFIG_VERSION:
            raise ConfigError(f"config schema version {d.get('version')!r} is not {CONFIG_VERSION}")
        unknown = set(d) - {"version", "seed", "dataset", "train", "eval"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(seed=int(d.get("seed", 0)),
                       dataset=_section(DatasetConfig, d.get("dataset", {})),
                       train=TrainConfig.from_dict(d.get("train", {})),
                       eval=_section(EvalConfig, d.get("eval", {})))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e


def _section(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return RunConfig.from_dict(data)


# ------------------------------------------------------------------ seeding

def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stage, derived from the root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def stream_seeds(seed: int, name: str, n: int) -> list[int]:
    return [int(s) for s in substream(seed, name).integers(0, 2**31 - 1, size=n)]


def worker_count() -> int:
    env = os.environ.get(WORKERS_ENV)
    cpus = os.cpu_count() or 1
    if env is None:
        return cpus
    try:
        return max(1, min(int(env), cpus))
    except ValueError as e:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from e


def _pmap(fn, items) -> list:
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(n) as ex:
        return list(ex.map(fn, items))  # results come back in submission order


# ------------------------------------------------------------------ datasets

def _nominal(seed, cfg: DatasetConfig):
    return sample_nominal_scenario(seed, cfg.history, cfg.log_ticks, variants=cfg.nominal_variants)


def _longtail(job, history):
    family, seed = job
    return sample_concrete_scenario(default_logical(family), seed, history)


def generate_datasets(cfg: RunConfig) -> dict[str, list[ScenarioSpec]]:
    d = cfg.dataset
    out = {}
    for name in ("nominal_train", "nominal_heldout"):
        seeds = stream_seeds(cfg.seed, f"scenario-gen/{name}", getattr(d, name))
        out[name] = _pmap(partial(_nominal, cfg=d), seeds)
    for name in ("longtail_train", "longtail_heldout", "longtail_ood"):
        n = getattr(d, name)
        seeds = stream_seeds(cfg.seed, f"scenario-gen/{name}", n)
        fams = [d.heldout_family] * n if name == "longtail_ood" else \
            [d.train_families[k % len(d.train_families)] for k in range(n)]
        out[name] = _pmap(partial(_longtail, history=d.history), list(zip(fams, seeds)))
    return out


# ------------------------------------------------------------------ training

def initial_networks(cfg: RunConfig, horizon: int = HISTORY) -> tuple[ParameterSet, ParameterSet]:
    rng = substream(cfg.seed, "init")
    f = feature_dim(horizon)
    return init_policy(f, cfg.train.hidden, rng), init_value(f, cfg.train.hidden, rng)


def train_model(cfg: RunConfig, data: dict, on_epoch=None) -> tuple[TrainState, list[dict]]:
    params, vparams = initial_networks(cfg, cfg.dataset.history)
    return train(cfg.train, data.get("nominal_train", []), data.get("longtail_train", []), params, vparams,
                 substream(cfg.seed, "rollout"), on_epoch)


# ---------------------------------------------------------------- evaluation

def rollout_set(specs, ticks: int, params: ParameterSet | None = None, controller: str = "policy",
                mode: str = "mean", seed: int = 0) -> Trajectory:
    """Evaluation rollout: infractions are recorded and the scene continues."""
    rng = substream(seed, "eval-rollout")
    return rollout_batch(PolicyMixture(params, controller), specs, ticks, mode=mode, rng=rng,
                         termination="none")


def expert_tracks(specs) -> list[Track]:
    return [Track.from_expert(s) for s in specs]


def tracks_from_logs(logs: list[LoggedTrajectory], specs) -> list[Track]:
    """Evaluation tracks from logged rollouts; infractions are recomputed from the states."""
    if len(logs) != len(specs):
        raise ConfigError(f"{len(logs)} logged scenarios but {len(specs)} scenario records")
    out = []
    for lg, spec in zip(logs, specs):
        if lg.states.shape[1] != spec.n_agents:
            raise ConfigError(f"log {lg.scenario} has {lg.states.shape[1]} agents, scenario has {spec.n_agents}")
        T = len(lg.actions)
        col = np.zeros((T, spec.n_agents), bool)
        off = np.zeros((T, spec.n_agents), bool)
        for t in range(T):
            col[t], off[t] = infractions(lg.states[t + 1], spec.dims, lg.alive[t + 1], spec.graph)
        learner = (lg.source != "hero") & (lg.source != "pad")
        out.append(Track(lg.states, lg.actions, learner, spec, col, off))
    return out


def evaluate_tracks(cfg: RunConfig, sim: list[Track], specs=None) -> MetricReport:
    """Metric report; reconstruction and JSD rows appear when ``specs`` carry expert logs."""
    gt = None
    if specs and all(s.is_nominal for s in specs):
        gt = expert_tracks(specs)
    e = cfg.eval
    return evaluate(sim, gt, e.n_resamples, seed=int(substream(cfg.seed, "eval").integers(2**31)),
                    level=e.level, horizon_s=e.horizon_s)


def evaluate_policy(cfg: RunConfig, params: ParameterSet, data: dict) -> dict[str, MetricReport]:
    """Held-out reports for one trained policy."""
    e = cfg.eval
    reports = {}
    for name, ticks in (("nominal_heldout", e.nominal_ticks), ("longtail_heldout", e.longtail_ticks),
                        ("longtail_ood", e.longtail_ticks)):
        specs = data.get(name) or []
        if len(specs) < 2:
            continue
        traj = rollout_set(specs, ticks, params, mode=e.action_mode, seed=cfg.seed)
        sim = [Track.from_rollout(traj, b) for b in range(traj.batch)]
        reports[name] = evaluate_tracks(cfg, sim, specs)
    return reports
