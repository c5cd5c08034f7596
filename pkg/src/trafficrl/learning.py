"""Training objectives: closed-loop imitation (BPTT), factorised PPO, behaviour cloning, AdamW."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .features import scene_features
from .policy import ParameterSet, log_prob, policy_forward, value_forward
from .scenario import ScenarioSpec, sample_initial_state
from .scene import MapBatch, SceneState
from .simulator import PolicyMixture, Trajectory, rollout_batch

log = logging.getLogger(__name__)

MODES = ("BC", "IL", "RL", "RL_SHAPED", "BC_RL", "RTR")


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "RTR"
    lambda_rl: float = 5.0
    alpha: float = 0.5
    gamma: float = 0.79
    gae_lambda: float = 1.0
    clip_eps: float = 0.2
    il_minibatch: int = 32
    ppo_batch: int = 192
    ppo_minibatch: int = 32
    ppo_epochs: int = 1
    learning_rate: float = 1e-5
    weight_decay: float = 1e-4
    grad_clip_norm: float = 1.0
    total_epochs: int = 10
    lr_decay_factor: float = 0.2
    lr_decay_every_epochs: int = 3
    huber_delta: float = 1.0
    rollout_T: int = 10
    seed: int = 0
    iters_per_epoch: int = 1
    il_action_mode: str = "mean"
    value_coef: float = 1.0
    hidden: tuple = (64, 64, 64)
    normalize_advantages: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.mode not in MODES:
            raise TrainingError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for name in ("il_minibatch", "ppo_batch", "ppo_minibatch", "ppo_epochs", "total_epochs",
                     "lr_decay_every_epochs", "rollout_T", "iters_per_epoch"):
            if int(getattr(self, name)) < 1:
                raise TrainingError(f"{name} must be at least 1")
        if not 0.0 < self.clip_eps < 1.0:
            raise TrainingError("clip_eps must lie in (0, 1)")
        if not 0.0 <= self.alpha <= 1.0:
            raise TrainingError("alpha must lie in [0, 1]")
        if not 0.0 < self.gamma <= 1.0:
            raise TrainingError("gamma must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise TrainingError("gae_lambda must lie in [0, 1]")
        if self.lambda_rl < 0:
            raise TrainingError("lambda_rl must be non-negative")
        if self.il_action_mode not in ("mean", "reparameterized"):
            raise TrainingError("il_action_mode must be 'mean' or 'reparameterized'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainingError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_every_epochs)


# --------------------------------------------------------------- imitation

def huber(r2, delta: float):
    """Huber penalty of a Euclidean norm given its square (taped)."""
    r2v = ad.value(r2)
    r = ad.sqrt(r2 + 1e-24)
    return ad.where(r2v < delta * delta, 0.5 * r2, delta * (r - 0.5 * delta))


def _expert_positions(specs, T):
    A = max(s.n_agents for s in specs)
    pos = np.zeros((len(specs), T + 1, A, 2))
    mask = np.zeros((len(specs), A), bool)
    for b, s in enumerate(specs):
        pos[b, :, :s.n_agents] = s.expert_log.states[:T + 1, :, :2]
        mask[b, :s.n_agents] = ~s.hero_flags
    return pos, mask


def trajectory_distance(tape_states, expert_pos, mask, delta: float):
    """Per-scenario ``sum_t sum_i huber(|p_t - p^E_t|)`` over ticks 1..T (taped)."""
    per_tick = []
    for t in range(1, len(tape_states)):
        p = tape_states[t]
        dx = p[..., 0] - expert_pos[:, t, :, 0]
        dy = p[..., 1] - expert_pos[:, t, :, 1]
        h = huber(dx * dx + dy * dy, delta) * mask
        per_tick.append(ad.reduce_sum(h, axis=-1))
    return ad.stack(per_tick, axis=1)  # (B, T)


def il_loss(specs, params: ParameterSet, config: TrainConfig, rng=None, normalizer=None):
    """Closed-loop imitation loss and its BPTT gradient.

    Unrolls the learner from each scenario's first logged state for
    ``rollout_T`` ticks and sums the Huber position error over ticks and agents.
    The returned loss is that sum averaged over ``normalizer`` (default: the
    number of scenarios).
    """
    specs = [specs] if isinstance(specs, ScenarioSpec) else list(specs)
    if not specs:
        raise TrainingError("il_loss needs at least one scenario")
    for s in specs:
        if not s.is_nominal:
            raise TrainingError("il_loss needs nominal scenarios with an expert log")
    T = config.rollout_T
    theta = ad.Var(params.values)
    traj = rollout_batch(PolicyMixture(params, theta=theta), specs, T, mode=config.il_action_mode,
                         rng=rng, termination="none", require_log=True)
    pos, mask = _expert_positions(specs, T)
    per_tick = trajectory_distance(traj.tape_states, pos, mask, config.huber_delta)
    vals = ad.value(per_tick)
    if not np.all(np.isfinite(vals)):
        bad = int(np.argmax(~np.isfinite(vals).all(axis=0))) + 1
        raise TrainingError(f"non-finite imitation loss at tick {bad}")
    n = len(specs) if normalizer is None else normalizer
    loss = ad.reduce_sum(per_tick) / n
    (g,) = ad.grad(loss, [theta])
    return float(ad.value(loss)), g, traj


def expert_feature_batch(specs):
    """Features and recorded actions at every logged (tick, learner agent)."""
    feats, acts = [], []
    for s in specs:
        log_ = s.expert_log
        H = s.history.shape[1] - 1
        seq = np.concatenate([s.history, np.transpose(log_.states[1:], (1, 0, 2))], axis=1)  # (N, H+1+T, 4)
        T = log_.ticks
        win = np.stack([seq[:, t:t + H + 1] for t in range(T)])  # (T, N, H+1, 4)
        n = s.n_agents
        scene = SceneState(win[:, :, -1].copy(), win, np.tile(s.dims, (T, 1, 1)), np.ones((T, n), bool),
                           np.tile(s.hero_flags, (T, 1)), np.ones((T, n), bool), np.zeros((T, n), bool),
                           MapBatch.from_graphs([s.graph] * T))
        f = ad.value(scene_features(scene))
        keep = ~s.hero_flags
        feats.append(f[:, keep].reshape(-1, f.shape[-1]))
        acts.append(log_.actions[:, keep].reshape(-1, 2))
    return np.concatenate(feats), np.concatenate(acts)


def bc_loss(specs_or_batch, params: ParameterSet):
    """Mean negative log-likelihood of expert actions at expert states, with gradient."""
    if isinstance(specs_or_batch, tuple):
        feats, acts = specs_or_batch
    else:
        feats, acts = expert_feature_batch(specs_or_batch)
    theta = ad.Var(params.values)
    dist = policy_forward(params, feats, theta)
    nll = -ad.reduce_sum(log_prob(dist, acts)) / len(acts)
    (g,) = ad.grad(nll, [theta])
    return float(ad.value(nll)), g


# -------------------------------------------------------------- RL targets

def compute_value_targets(rewards, gamma: float, bootstrap=None):
    """Per-agent discounted return ``sum_t gamma^t r_t`` from the rollout start.

    ``rewards`` is ``(T, N)``; ``bootstrap`` optionally adds ``gamma^T V_T``.
    """
    r = np.asarray(rewards, float)
    T = r.shape[0]
    disc = gamma ** np.arange(T)
    out = np.tensordot(disc, r, axes=(0, 0))
    if bootstrap is not None:
        out = out + gamma ** T * np.asarray(bootstrap, float)
    return out


def compute_gae(rewards, values, gamma: float, gae_lambda: float):
    """Per-agent GAE. ``rewards`` ``(T, N)``, ``values`` ``(T+1, N)`` including the bootstrap."""
    r = np.asarray(rewards, float)
    v = np.asarray(values, float)
    if v.shape[0] != r.shape[0] + 1:
        raise TrainingError("values must cover ticks 0..T")
    adv = np.zeros_like(r)
    last = np.zeros(r.shape[1:])
    for t in range(r.shape[0] - 1, -1, -1):
        delta = r[t] + gamma * v[t + 1] - v[t]
        last = delta + gamma * gae_lambda * last
        adv[t] = last
    return adv


@dataclass
class AdvantageBatch:
    features: np.ndarray     # (M, F)
    actions: np.ndarray      # (M, 2)
    old_logp: np.ndarray     # (M,)
    advantages: np.ndarray   # (M,)
    value_targets: np.ndarray  # (M,)
    group: np.ndarray        # (M,) scene-tick id used for the per-tick sum over agents
    scene: np.ndarray        # (M,) rollout index

    def __len__(self):
        return len(self.advantages)

    def subset(self, keep) -> "AdvantageBatch":
        return AdvantageBatch(*(getattr(self, f.name)[keep] for f in fields(self)))


def _rollout_values(traj: Trajectory, vparams: ParameterSet):
    f = np.nan_to_num(traj.features)
    return value_forward(vparams, f)  # (B, T+1, A)


def build_advantage_batch(traj: Trajectory, vparams: ParameterSet, gamma: float, gae_lambda: float,
                          normalize: bool = True) -> AdvantageBatch:
    """Factorised targets: every learner agent gets its own GAE and value target."""
    V = _rollout_values(traj, vparams)
    B, T1, A = V.shape
    learner = traj.present & (traj.source == "learner")
    adv = np.zeros((B, T1 - 1, A))
    vt = np.zeros((B, T1 - 1, A))
    for b in range(B):
        n = int(traj.length[b])
        vals = V[b, :n + 1].copy()
        if traj.terminated[b]:
            vals[n] = 0.0
        adv[b, :n] = compute_gae(traj.rewards[b, :n], vals, gamma, gae_lambda)
        vt[b, :n] = adv[b, :n] + vals[:n]
    mask = traj.valid[:, :, None] & traj.alive[:, :-1] & learner[:, None, :]
    bi, ti, ai = np.nonzero(mask)
    batch = AdvantageBatch(traj.features[bi, ti, ai], traj.actions[bi, ti, ai], traj.log_probs[bi, ti, ai],
                           adv[bi, ti, ai], vt[bi, ti, ai], bi * (T1 - 1) + ti, bi)
    if normalize:
        normalize_advantages(batch)
    return batch


def normalize_advantages(batch: AdvantageBatch) -> bool:
    a = batch.advantages
    if len(a) < 2:
        return False
    std = a.std()
    if np.all(a == a[0]) or not std > 0:
        log.info("zero-variance advantage batch of size %d; normalisation skipped", len(a))
        return False
    batch.advantages = (a - a.mean()) / std
    return True


def clipped_surrogate(ratio, adv, clip_eps: float):
    """Elementwise ``min(r A, clip(r, 1-eps, 1+eps) A)`` (taped in ``ratio``)."""
    unclipped = ratio * adv
    clipped = ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    return ad.minimum(unclipped, clipped)


def ppo_losses(batch: AdvantageBatch, params: ParameterSet, vparams: ParameterSet, clip_eps: float):
    """Factorised PPO: per-agent ratios, summed over agents, averaged over scene-ticks.

    Returns ``(surrogate, value_loss, policy_grad, value_grad)``; ``policy_grad``
    is the ascent direction of the surrogate (callers descend on its negation).
    """
    if len(batch) == 0:
        raise TrainingError("empty PPO batch")
    n_groups = len(np.unique(batch.group))
    theta = ad.Var(params.values)
    vtheta = ad.Var(vparams.values)
    dist = policy_forward(params, batch.features, theta)
    ratio = ad.exp(log_prob(dist, batch.actions) - batch.old_logp)
    surr = ad.reduce_sum(clipped_surrogate(ratio, batch.advantages, clip_eps)) / n_groups
    v = value_forward(vparams, batch.features, vtheta)
    vloss = ad.reduce_sum(ad.square(v - batch.value_targets)) / n_groups
    (gp,) = ad.grad(surr, [theta])
    (gv,) = ad.grad(vloss, [vtheta])
    return float(ad.value(surr)), float(ad.value(vloss)), gp, gv


def scene_level_ppo_objective(traj: Trajectory, params: ParameterSet, vparams: ParameterSet,
                              gamma: float, gae_lambda: float, clip_eps: float, new_params=None):
    """Unfactorised reference: one ratio, reward and value per scene.

    The joint ratio is ``exp(sum_i dlogp_i)``, the reward ``sum_i r_i`` and the
    value ``sum_i V_i``; advantages are not normalised.
    """
    new_params = params if new_params is None else new_params
    V = _rollout_values(traj, vparams)
    learner = traj.present & (traj.source == "learner")
    # one forward pass over the learner rows, so BLAS rounding matches the factorised path
    bi, ti, ai = np.nonzero(traj.valid[:, :, None] & traj.alive[:, :-1] & learner[:, None, :])
    dlogp = np.zeros(traj.rewards.shape)
    lp = ad.value(log_prob(policy_forward(new_params, traj.features[bi, ti, ai]), traj.actions[bi, ti, ai]))
    dlogp[bi, ti, ai] = lp - traj.log_probs[bi, ti, ai]
    parts, groups = [], 0
    for b in range(traj.batch):
        n = int(traj.length[b])
        keep = learner[b]
        vals = V[b, :n + 1][:, keep].sum(-1)
        if traj.terminated[b]:
            vals[n] = 0.0
        r = traj.rewards[b, :n][:, keep].sum(-1)
        adv = compute_gae(r[:, None], vals[:, None], gamma, gae_lambda)[:, 0]
        ratio = np.exp(dlogp[b, :n][:, keep].sum(-1))
        parts.append(ad.value(clipped_surrogate(ratio, adv, clip_eps)))
        groups += n
    return float(np.sum(np.concatenate(parts))) / groups


def factorized_ppo_objective(traj: Trajectory, params: ParameterSet, vparams: ParameterSet, gamma: float,
                             gae_lambda: float, clip_eps: float, new_params=None, normalize: bool = False):
    """Value of the factorised surrogate on a trajectory (no gradient)."""
    batch = build_advantage_batch(traj, vparams, gamma, gae_lambda, normalize)
    new_params = params if new_params is None else new_params
    lp = ad.value(log_prob(policy_forward(new_params, batch.features), batch.actions))
    ratio = np.exp(lp - batch.old_logp)
    s = ad.value(clipped_surrogate(ratio, batch.advantages, clip_eps))
    return float(np.sum(s)) / len(np.unique(batch.group))


# --------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def optimizer_step(params: ParameterSet, gradient, lr: float, weight_decay: float, grad_clip_norm: float,
                   state: AdamState, betas=(0.9, 0.999), eps: float = 1e-8) -> bool:
    """Global-norm clipping then AdamW with decoupled weight decay, in place.

    Returns ``False`` (and leaves everything untouched) for a non-finite gradient.
    """
    g = np.asarray(gradient, float)
    if g.shape != params.values.shape:
        raise TrainingError(f"gradient shape {g.shape} != parameter shape {params.values.shape}")
    if not np.all(np.isfinite(g)):
        log.warning("non-finite gradient; optimizer step skipped")
        return False
    norm = float(np.linalg.norm(g))
    if grad_clip_norm is not None and norm > grad_clip_norm:
        g = g * (grad_clip_norm / norm)
    b1, b2 = betas
    state.t += 1
    state.m = b1 * state.m + (1.0 - b1) * g
    state.v = b2 * state.v + (1.0 - b2) * g * g
    mhat = state.m / (1.0 - b1 ** state.t)
    vhat = state.v / (1.0 - b2 ** state.t)
    params.values = params.values * (1.0 - lr * weight_decay) - lr * mhat / (np.sqrt(vhat) + eps)
    params.grad = g
    params.step += 1
    return True


# ---------------------------------------------------------------- training

@dataclass
class TrainState:
    params: ParameterSet
    vparams: ParameterSet
    opt: AdamState
    vopt: AdamState
    epoch: int = 0
    skipped: int = 0
    bc_cache: dict = field(default_factory=dict)


def new_train_state(params: ParameterSet, vparams: ParameterSet) -> TrainState:
    return TrainState(params, vparams, AdamState.zeros(params.size), AdamState.zeros(vparams.size))


def _check_data(config: TrainConfig, nominal, longtail):
    mode = config.mode
    if mode in ("BC", "IL", "BC_RL", "RTR") and not nominal:
        raise TrainingError(f"mode {mode} needs a nominal scenario set")
    if mode in ("RL", "RL_SHAPED", "BC_RL", "RTR"):
        if config.alpha < 1.0 and not nominal:
            raise TrainingError("alpha < 1 needs a nominal scenario set")
        if config.alpha > 0.0 and not longtail:
            raise TrainingError("alpha > 0 needs a long-tail scenario set")


def _bc_batch(state: TrainState, specs):
    feats, acts = [], []
    for s in specs:
        key = id(s)
        if key not in state.bc_cache:
            state.bc_cache[key] = expert_feature_batch([s])
        f, a = state.bc_cache[key]
        feats.append(f)
        acts.append(a)
    return np.concatenate(feats), np.concatenate(acts)


def train_epoch(config: TrainConfig, nominal_set, longtail_set, state: TrainState, rng) -> dict:
    """One epoch of the selected mode; returns a report row."""
    _check_data(config, nominal_set, longtail_set)
    start = time.perf_counter()
    lr = config.lr_at(state.epoch)
    mode = config.mode
    uses_rl = mode in ("RL", "RL_SHAPED", "BC_RL", "RTR")
    stats = {"il_loss": [], "bc_loss": [], "surrogate": [], "value_loss": [], "return": [],
             "collision": [], "offroad": [], "learners": []}
    for _ in range(config.iters_per_epoch):
        if not uses_rl:
            _supervised_iteration(config, nominal_set, state, rng, lr, stats)
        else:
            _rl_iteration(config, nominal_set, longtail_set, state, rng, lr, stats)
    learners = max(sum(stats["learners"]), 1)
    report = {
        "epoch": state.epoch, "mode": mode, "lr": lr,
        "il_loss": _mean(stats["il_loss"]), "bc_loss": _mean(stats["bc_loss"]),
        "surrogate": _mean(stats["surrogate"]), "value_loss": _mean(stats["value_loss"]),
        "mean_return": _mean(stats["return"]),
        "collision_pct": 100.0 * sum(stats["collision"]) / learners,
        "offroad_pct": 100.0 * sum(stats["offroad"]) / learners,
        "steps": state.params.step, "skipped_steps": state.skipped,
        "wall_time": time.perf_counter() - start,
    }
    state.epoch += 1
    return report


def _mean(xs):
    return float(np.mean(xs)) if xs else float("nan")


def _apply(state: TrainState, grad, vgrad, lr, config: TrainConfig):
    if not optimizer_step(state.params, grad, lr, config.weight_decay, config.grad_clip_norm, state.opt):
        state.skipped += 1
    if vgrad is not None:
        if not optimizer_step(state.vparams, vgrad, lr, config.weight_decay, config.grad_clip_norm, state.vopt):
            state.skipped += 1


def _supervised_iteration(config, nominal_set, state, rng, lr, stats):
    n_updates = max(1, config.ppo_batch // config.ppo_minibatch)
    for _ in range(n_updates):
        idx = rng.integers(len(nominal_set), size=config.il_minibatch)
        chunk = [nominal_set[i] for i in idx]
        if config.mode == "BC":
            loss, g = bc_loss(_bc_batch(state, chunk), state.params)
            stats["bc_loss"].append(loss)
        else:
            loss, g, _ = il_loss(chunk, state.params, config, rng)
            stats["il_loss"].append(loss)
        _apply(state, g, None, lr, config)


def _rl_iteration(config, nominal_set, longtail_set, state, rng, lr, stats):
    K = config.ppo_batch
    specs = [sample_initial_state(config.alpha, nominal_set, longtail_set, rng) for _ in range(K)]
    reward = "shaped" if config.mode == "RL_SHAPED" else "sparse"
    traj = rollout_batch(PolicyMixture(state.params), specs, config.rollout_T, mode="sample", rng=rng,
                         termination="scenario", reward=reward, record_features=True)
    learner = traj.present & (traj.source == "learner")
    stats["return"].append(float(traj.discounted_returns(config.gamma)[learner].mean()))
    stats["collision"].append(int((traj.collision.any(1) & learner).sum()))
    stats["offroad"].append(int((traj.offroad.any(1) & learner).sum()))
    stats["learners"].append(int(learner.sum()))
    batch = build_advantage_batch(traj, state.vparams, config.gamma, config.gae_lambda,
                                  config.normalize_advantages)
    mb = config.ppo_minibatch
    for _ in range(config.ppo_epochs):
        for lo in range(0, K, mb):
            members = np.arange(lo, min(lo + mb, K))
            sub = batch.subset(np.isin(batch.scene, members))
            g = np.zeros(state.params.size)
            vg = None
            if len(sub):
                surr, vloss, gp, gv = ppo_losses(sub, state.params, state.vparams, config.clip_eps)
                g -= config.lambda_rl * gp
                vg = config.value_coef * gv
                stats["surrogate"].append(surr)
                stats["value_loss"].append(vloss)
            nominal = [specs[i] for i in members if specs[i].is_nominal]
            if nominal and config.mode == "RTR":
                loss, gi, _ = il_loss(nominal, state.params, config, rng, normalizer=len(members))
                g += gi
                stats["il_loss"].append(loss * len(members) / len(nominal))
            elif nominal and config.mode == "BC_RL":
                loss, gb = bc_loss(_bc_batch(state, nominal), state.params)
                g += gb * len(nominal) / len(members)
                stats["bc_loss"].append(loss)
            _apply(state, g, vg, lr, config)


def train(config: TrainConfig, nominal_set, longtail_set, params: ParameterSet, vparams: ParameterSet,
          rng=None, on_epoch=None):
    """Run ``total_epochs`` epochs; returns ``(state, reports)``."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    state = new_train_state(params, vparams)
    reports = []
    for _ in range(config.total_epochs):
        rep = train_epoch(config, nominal_set, longtail_set, state, rng)
        reports.append(rep)
        if on_epoch is not None:
            on_epoch(rep, state)
    return state, reports
