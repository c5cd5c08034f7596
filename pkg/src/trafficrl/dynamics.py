"""Kinematic bicycle model (rear-axle reference point, forward Euler)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

DT = 0.5
MAX_STEER = 0.45
MAX_ACCEL = 6.0


class DynamicsError(ValueError):
    pass


@dataclass(frozen=True)
class AgentKinematicState:
    x: float
    y: float
    theta: float
    v: float
    wheelbase: float = 2.8
    box_length: float = 4.6
    box_width: float = 1.9

    def __post_init__(self):
        if not self.wheelbase > 0:
            raise DynamicsError("wheelbase must be positive")
        if self.box_length < self.wheelbase:
            raise DynamicsError("box_length must be at least the wheelbase")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v])


@dataclass(frozen=True)
class AgentAction:
    accel: float
    steer: float

    def as_array(self) -> np.ndarray:
        return np.array([self.accel, self.steer])


def _check(s, a, wheelbase, dt):
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a)) and np.all(np.isfinite(wheelbase))):
        raise DynamicsError("non-finite state or action")
    if dt <= 0:
        raise DynamicsError("dt must be positive")
    if np.any(np.abs(a[..., 1]) >= np.pi / 2):
        raise DynamicsError("steering angle at or beyond +-pi/2")


def step_arrays(s: np.ndarray, a: np.ndarray, wheelbase, dt: float = DT):
    """Vectorised Euler step.

    ``s`` is ``(..., 4)`` holding (x, y, theta, v); ``a`` is ``(..., 2)`` holding
    (accel, steer). Returns ``(next_state, clamped)`` where ``clamped`` flags
    entries whose speed was floored at zero.
    """
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    _check(s, a, wheelbase, dt)
    x, y, th, v = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    u, phi = a[..., 0], a[..., 1]
    v_raw = v + u * dt
    clamped = v_raw < 0.0
    out = np.stack([
        x + v * np.cos(th) * dt,
        y + v * np.sin(th) * dt,
        th + v / wheelbase * np.tan(phi) * dt,
        np.where(clamped, 0.0, v_raw),
    ], axis=-1)
    return out, clamped


def jacobian_arrays(s: np.ndarray, a: np.ndarray, wheelbase, dt: float = DT, clamped=None):
    """Batched Jacobians ``(..., 4, 4)`` and ``(..., 4, 2)`` of :func:`step_arrays`."""
    s = np.asarray(s, dtype=float)
    a = np.asarray(a, dtype=float)
    _check(s, a, wheelbase, dt)
    th, v = s[..., 2], s[..., 3]
    phi = a[..., 1]
    L = np.broadcast_to(np.asarray(wheelbase, dtype=float), v.shape)
    c, sn, tn = np.cos(th), np.sin(th), np.tan(phi)
    if clamped is None:
        clamped = v + a[..., 0] * dt < 0.0
    shape = v.shape
    js = np.zeros(shape + (4, 4))
    ja = np.zeros(shape + (4, 2))
    js[..., 0, 0] = 1.0
    js[..., 0, 2] = -v * sn * dt
    js[..., 0, 3] = c * dt
    js[..., 1, 1] = 1.0
    js[..., 1, 2] = v * c * dt
    js[..., 1, 3] = sn * dt
    js[..., 2, 2] = 1.0
    js[..., 2, 3] = tn * dt / L
    js[..., 3, 3] = np.where(clamped, 0.0, 1.0)
    ja[..., 2, 1] = v * dt / (L * np.cos(phi) ** 2)
    ja[..., 3, 0] = np.where(clamped, 0.0, dt)
    return js, ja


def bicycle_step(s: AgentKinematicState, a: AgentAction, dt: float = DT) -> AgentKinematicState:
    nxt, _ = step_arrays(s.as_array(), a.as_array(), s.wheelbase, dt)
    return AgentKinematicState(*nxt.tolist(), wheelbase=s.wheelbase,
                               box_length=s.box_length, box_width=s.box_width)


def bicycle_jacobians(s: AgentKinematicState, a: AgentAction, dt: float = DT):
    """Return ``(d next / d state, d next / d action)`` with rows (x, y, theta, v)."""
    return jacobian_arrays(s.as_array(), a.as_array(), s.wheelbase, dt)


def step_taped(s, a, wheelbase, dt: float = DT):
    """Euler step recorded on the tape; its backward pass uses the analytic Jacobians."""
    sv, av = ad.value(s), ad.value(a)
    nxt, clamped = step_arrays(sv, av, wheelbase, dt)
    if not (ad.is_var(s) or ad.is_var(a)):
        return nxt
    js, ja = jacobian_arrays(sv, av, wheelbase, dt, clamped)
    return ad.custom(nxt, [
        (s, lambda g: np.einsum("...i,...ij->...j", g, js)),
        (a, lambda g: np.einsum("...i,...ij->...j", g, ja)),
    ])
