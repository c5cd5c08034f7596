"""MLP policy and value networks over per-agent features."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dynamics import MAX_ACCEL, MAX_STEER

SIGMA_FLOOR = 1e-4
LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1


class PolicyError(ValueError):
    pass


@dataclass
class ParameterSet:
    """Flat parameter vector of a tanh MLP plus a gradient buffer of the same shape."""

    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    values: np.ndarray
    grad: np.ndarray = None
    step: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.size,):
            raise PolicyError(f"expected {self.size} parameters, got {self.values.shape}")
        if self.grad is None:
            self.grad = np.zeros_like(self.values)

    @property
    def widths(self) -> list[int]:
        return [self.in_dim, *self.hidden, self.out_dim]

    @property
    def size(self) -> int:
        w = self.widths
        return sum(w[k] * w[k + 1] + w[k + 1] for k in range(len(w) - 1))

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.in_dim, self.hidden, self.out_dim, self.values.copy(),
                            self.grad.copy(), self.step)

    def layers(self, theta=None):
        """Yield ``(W, b)`` views (tape slices when ``theta`` is a Var)."""
        theta = self.values if theta is None else theta
        w = self.widths
        off = 0
        out = []
        for k in range(len(w) - 1):
            n_in, n_out = w[k], w[k + 1]
            W = ad.reshape(theta[off:off + n_in * n_out], (n_in, n_out))
            off += n_in * n_out
            b = theta[off:off + n_out]
            off += n_out
            out.append((W, b))
        return out


def init_params(in_dim: int, hidden=(64, 64, 64), out_dim: int = 4, rng=None,
                out_scale: float = 0.01, out_bias=None) -> ParameterSet:
    rng = np.random.default_rng(0) if rng is None else rng
    widths = [in_dim, *hidden, out_dim]
    chunks = []
    for k in range(len(widths) - 1):
        n_in, n_out = widths[k], widths[k + 1]
        scale = 1.0 / math.sqrt(n_in)
        if k == len(widths) - 2:
            scale *= out_scale
        chunks.append(rng.normal(0.0, scale, size=n_in * n_out))
        b = np.zeros(n_out) if out_bias is None or k < len(widths) - 2 else np.asarray(out_bias, float)
        chunks.append(b)
    return ParameterSet(in_dim, tuple(hidden), out_dim, np.concatenate(chunks))


def _inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


def init_policy(in_dim: int, hidden=(64, 64, 64), rng=None, accel_sigma: float = 0.5,
                steer_sigma: float = 0.005) -> ParameterSet:
    bias = [0.0, 0.0, _inv_softplus(accel_sigma - SIGMA_FLOOR), _inv_softplus(steer_sigma - SIGMA_FLOOR)]
    return init_params(in_dim, hidden, 4, rng, out_bias=bias)


def init_value(in_dim: int, hidden=(64, 64, 64), rng=None) -> ParameterSet:
    return init_params(in_dim, hidden, 1, rng)


def _batched_mlp(params: ParameterSet, f: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Untaped forward with one parameter vector per leading batch entry of ``f``."""
    w = params.widths
    off = 0
    h = f
    for k in range(len(w) - 1):
        n_in, n_out = w[k], w[k + 1]
        W = theta[:, off:off + n_in * n_out].reshape(-1, n_in, n_out)
        off += n_in * n_out
        b = theta[:, off:off + n_out]
        off += n_out
        h = np.einsum("b...i,bio->b...o", h, W) + b.reshape((-1,) + (1,) * (h.ndim - 2) + (n_out,))
        if k < len(w) - 2:
            h = np.tanh(h)
    return h


def mlp(params: ParameterSet, f, theta=None):
    """Forward pass; ``theta`` may be a tape variable or a ``(B, P)`` stack of vectors."""
    if ad.value(f).shape[-1] != params.in_dim:
        raise PolicyError(f"feature dimension {ad.value(f).shape[-1]} != {params.in_dim}")
    if isinstance(theta, np.ndarray) and theta.ndim == 2:
        return _batched_mlp(params, np.asarray(f, float), theta)
    layers = params.layers(theta)
    h = f
    for W, b in layers[:-1]:
        h = ad.tanh(ad.matmul(h, W) + b)
    W, b = layers[-1]
    return ad.matmul(h, W) + b


@dataclass
class ActionDistribution:
    mu: object     # (..., 2): accel, steer
    sigma: object  # (..., 2), strictly positive


def policy_forward(params: ParameterSet, f, theta=None) -> ActionDistribution:
    out = mlp(params, f, theta)
    mu = out[..., 0:2]
    sigma = ad.softplus(out[..., 2:4]) + SIGMA_FLOOR
    return ActionDistribution(mu, sigma)


def value_forward(vparams: ParameterSet, f, theta=None):
    return mlp(vparams, f, theta)[..., 0]


ACTION_LOW = np.array([-MAX_ACCEL, -MAX_STEER])
ACTION_HIGH = np.array([MAX_ACCEL, MAX_STEER])


@dataclass
class SampledAction:
    action: object          # clipped action, possibly taped
    clipped: np.ndarray     # per-dimension clip events
    raw: np.ndarray = field(default=None)


def sample_action(dist: ActionDistribution, rng=None, mode: str = "mean", z=None,
                  low=ACTION_LOW, high=ACTION_HIGH) -> SampledAction:
    """Mean or reparameterised sample ``mu + sigma * z``, clipped to the action bounds."""
    if mode == "mean":
        a = dist.mu
    elif mode in ("reparameterized", "sample"):
        if z is None:
            z = rng.standard_normal(ad.value(dist.mu).shape)
        a = dist.mu + dist.sigma * z
    else:
        raise PolicyError(f"unknown sampling mode {mode!r}")
    av = ad.value(a)
    clipped = (av < low) | (av > high)
    return SampledAction(ad.clip(a, low, high), clipped, av)


def log_prob(dist: ActionDistribution, a):
    """Diagonal-normal log density summed over the two action dimensions."""
    z = (a - dist.mu) / dist.sigma
    return ad.reduce_sum(-0.5 * ad.square(z) - ad.log(dist.sigma), axis=-1) - LOG_2PI


# ----------------------------------------------------------------- checkpoints

def _dump_params(p: ParameterSet) -> dict:
    return {"in_dim": p.in_dim, "hidden": list(p.hidden), "out_dim": p.out_dim, "step": p.step,
            "values": [float(v) for v in p.values]}


def _load_params(d: dict) -> ParameterSet:
    return ParameterSet(int(d["in_dim"]), tuple(d["hidden"]), int(d["out_dim"]),
                        np.array(d["values"], dtype=float), step=int(d.get("step", 0)))


def checkpoint_dict(policy: ParameterSet, value: ParameterSet, feature_dim: int, extra=None) -> dict:
    return {"version": CHECKPOINT_VERSION, "feature_dim": feature_dim,
            "policy": _dump_params(policy), "value": _dump_params(value), "extra": extra or {}}


def checkpoint_bytes(policy: ParameterSet, value: ParameterSet, feature_dim: int, extra=None) -> bytes:
    return json.dumps(checkpoint_dict(policy, value, feature_dim, extra), sort_keys=True).encode()


def load_checkpoint(data: dict, feature_dim: int | None = None):
    if data.get("version") != CHECKPOINT_VERSION:
        raise PolicyError(f"unsupported checkpoint version {data.get('version')!r}")
    pol, val = _load_params(data["policy"]), _load_params(data["value"])
    fd = int(data["feature_dim"])
    if pol.in_dim != fd or val.in_dim != fd:
        raise PolicyError("checkpoint network input sizes disagree with its feature_dim")
    if feature_dim is not None and fd != feature_dim:
        raise PolicyError(f"checkpoint feature_dim {fd} != expected {feature_dim}")
    return pol, val, data.get("extra", {})
