"""Minimal reverse-mode differentiation over numpy arrays.

Every op accepts plain arrays or :class:`Var` nodes. When no input is a
``Var`` the op returns a plain ``ndarray`` and nothing is recorded, so the
same feature / network code runs untaped during ordinary rollouts and taped
during backpropagation through time.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Vjp = Callable[[np.ndarray], np.ndarray]


class Var:
    """A node on the tape: a value plus the vector-Jacobian products to its parents."""

    __slots__ = ("value", "parents")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value, parents: Sequence[tuple["Var", Vjp]] = ()):
        self.value = np.asarray(value, dtype=float)
        self.parents = tuple(parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, k):
        if k == 2:
            return square(self)
        raise NotImplementedError("only squaring is supported")


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def is_var(x) -> bool:
    return isinstance(x, Var)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(out: np.ndarray, inputs: Iterable[tuple[object, Vjp]]):
    parents = [(x, f) for x, f in inputs if isinstance(x, Var)]
    if not parents:
        return out
    return Var(out, parents)


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    return _node(out, [(a, lambda g: _unbroadcast(g, av.shape)),
                       (b, lambda g: _unbroadcast(g, bv.shape))])


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    return _node(out, [(a, lambda g: _unbroadcast(g, av.shape)),
                       (b, lambda g: _unbroadcast(-g, bv.shape))])


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    return _node(out, [(a, lambda g: _unbroadcast(g * bv, av.shape)),
                       (b, lambda g: _unbroadcast(g * av, bv.shape))])


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _node(out, [(a, lambda g: _unbroadcast(g / bv, av.shape)),
                       (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape))])


def neg(a):
    return _node(-value(a), [(a, lambda g: -g)])


def square(a):
    av = value(a)
    return _node(av * av, [(a, lambda g: 2.0 * g * av)])


def matmul(a, b):
    """Matrix product over the last two axes; ``b`` may be a 2-D weight."""
    av, bv = value(a), value(b)
    out = av @ bv

    def ga(g):
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def gb(g):
        if bv.ndim == 2 and av.ndim > 2:
            return av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return _node(out, [(a, ga), (b, gb)])


# ----------------------------------------------------------------- unary maps

def tanh(a):
    t = np.tanh(value(a))
    return _node(t, [(a, lambda g: g * (1.0 - t * t))])


def exp(a):
    e = np.exp(value(a))
    return _node(e, [(a, lambda g: g * e)])


def log(a):
    av = value(a)
    return _node(np.log(av), [(a, lambda g: g / av)])


def sin(a):
    av = value(a)
    return _node(np.sin(av), [(a, lambda g: g * np.cos(av))])


def cos(a):
    av = value(a)
    return _node(np.cos(av), [(a, lambda g: -g * np.sin(av))])


def sqrt(a):
    s = np.sqrt(value(a))
    return _node(s, [(a, lambda g: g * 0.5 / s)])


def absolute(a):
    av = value(a)
    return _node(np.abs(av), [(a, lambda g: g * np.sign(av))])


def softplus(a):
    av = value(a)
    out = np.logaddexp(0.0, av)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _node(out, [(a, lambda g: g * sig)])


def atan2(y, x):
    yv, xv = value(y), value(x)
    r2 = xv * xv + yv * yv
    out = np.arctan2(yv, xv)
    return _node(out, [(y, lambda g: _unbroadcast(g * xv / r2, yv.shape)),
                       (x, lambda g: _unbroadcast(-g * yv / r2, xv.shape))])


# -------------------------------------------------------- selection & shaping

def clip(a, lo, hi):
    """Clip with zero gradient wherever the bound is active."""
    av = value(a)
    out = np.clip(av, lo, hi)
    inside = (av > lo) & (av < hi)
    return _node(out, [(a, lambda g: g * inside)])


def where(cond, a, b):
    av, bv = value(a), value(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, av, bv)
    return _node(out, [(a, lambda g: _unbroadcast(np.where(cond, g, 0.0), av.shape)),
                       (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), bv.shape))])


def minimum(a, b):
    return where(value(a) <= value(b), a, b)


def maximum(a, b):
    return where(value(a) >= value(b), a, b)


def reduce_sum(a, axis=None, keepdims=False):
    av = value(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _node(out, [(a, back)])


def take_along_axis(a, idx, axis):
    av = value(a)
    out = np.take_along_axis(av, idx, axis=axis)

    def back(g):
        full = np.zeros_like(av)
        # indices along `axis` may repeat; accumulate explicitly
        grids = list(np.indices(idx.shape, sparse=True))
        grids[axis % av.ndim] = idx
        np.add.at(full, tuple(grids), g)
        return full

    return _node(out, [(a, back)])


def reduce_min(a, axis):
    av = value(a)
    idx = np.expand_dims(np.argmin(av, axis=axis), axis)
    return reshape(take_along_axis(a, idx, axis), np.squeeze(np.take_along_axis(av, idx, axis=axis), axis).shape)


def reshape(a, shape):
    av = value(a)
    return _node(av.reshape(shape), [(a, lambda g: g.reshape(av.shape))])


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(i is None or i is Ellipsis or isinstance(i, (slice, int, np.integer)) for i in items)


def getitem(a, idx):
    av = value(a)
    out = av[idx]
    basic = _is_basic(idx)

    def back(g):
        z = np.zeros_like(av)
        if basic:
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return z

    return _node(np.array(out, dtype=float), [(a, back)])


def concatenate(xs: Sequence, axis=-1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    ins = []
    for k, x in enumerate(xs):
        lo, hi = bounds[k], bounds[k + 1]
        shape = vals[k].shape

        def back(g, lo=lo, hi=hi, shape=shape):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return _unbroadcast(g[tuple(sl)], shape)

        ins.append((x, back))
    return _node(out, ins)


def stack(xs: Sequence, axis=-1):
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)
    ins = []
    for k, x in enumerate(xs):
        ins.append((x, lambda g, k=k: np.take(g, k, axis=axis)))
    return _node(out, ins)


def custom(out: np.ndarray, inputs: Sequence[tuple[object, Vjp]]):
    """Record a primitive whose vector-Jacobian products are supplied by the caller."""
    return _node(np.asarray(out, dtype=float), inputs)


# ------------------------------------------------------------------- backward

def _toposort(root: Var) -> list[Var]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p, _ in node.parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def grad(out, wrt: Sequence[Var], seed: np.ndarray | None = None) -> list[np.ndarray]:
    """Gradients of ``out`` (scalar unless ``seed`` is given) with respect to ``wrt``."""
    wrt_ids = {id(w) for w in wrt}
    if not isinstance(out, Var):
        return [np.zeros_like(w.value) for w in wrt]
    if seed is None:
        if out.value.size != 1:
            raise ValueError("grad of a non-scalar output needs an explicit seed")
        seed = np.ones_like(out.value)
    grads: dict[int, np.ndarray] = {id(out): np.asarray(seed, dtype=float)}
    for node in reversed(_toposort(out)):
        g = grads.pop(id(node), None) if id(node) not in wrt_ids else grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = contrib
    return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]
