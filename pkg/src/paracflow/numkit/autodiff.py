"""Reverse-mode automatic differentiation on dense float64 arrays.

Operations on :class:`Var` objects are recorded on the innermost active
:class:`GradTape` (if any).  With no tape active they only compute values, so
the same model code serves evaluation and training.

    with GradTape() as tape:
        loss = mean(square(net.apply(Var(x)) - y))
    grads = tape.gradient(loss, net.parameters())
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, StateError

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


class Var:
    """A float64 array node, either a leaf or the result of a recorded op."""

    __slots__ = ("value", "__weakref__")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_var(other)))

    def __rsub__(self, other):
        return add(as_var(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, cols):
        return take_cols(self, cols)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


class GradTape:
    """Wengert list of primitive ops; replayed backwards by :meth:`gradient`."""

    def __init__(self):
        self.records: list[tuple[Var, tuple[Var, ...], Callable]] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "GradTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def record(self, out: Var, inputs: tuple[Var, ...], backward: Callable) -> None:
        self.records.append((out, inputs, backward))
        self._outputs.add(id(out))

    def gradient(self, target: Var, wrt: Sequence[Var], seed=None) -> list[np.ndarray]:
        """Adjoints of ``target`` w.r.t. each of ``wrt``.

        ``seed`` is the output adjoint; it defaults to ones (i.e. the gradient
        of ``sum(target)``).
        """
        if id(target) not in self._outputs:
            raise StateError("target was not produced on this tape; run the forward pass first")
        adj: dict[int, np.ndarray] = {}
        adj[id(target)] = np.ones_like(target.value) if seed is None else np.asarray(seed, float)
        if adj[id(target)].shape != target.value.shape:
            raise ShapeError(f"seed shape {adj[id(target)].shape} != target shape {target.shape}")
        for out, inputs, backward in reversed(self.records):
            g = adj.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None:
                    continue
                k = id(inp)
                if k in adj:
                    adj[k] = adj[k] + gi
                else:
                    adj[k] = gi
        return [adj.get(id(w), np.zeros_like(w.value)) for w in wrt]


def _record(out: Var, inputs: tuple[Var, ...], backward: Callable) -> Var:
    tapes = _stack()
    if tapes:
        tapes[-1].record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    out = Var(a.value + b.value)
    sa, sb = a.value.shape, b.value.shape
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Var) -> Var:
    return _record(Var(-a.value), (a,), lambda g: (-g,))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    out = Var(av * bv)
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def matmul(a: Var, b: Var) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")
    out = Var(av @ bv)
    return _record(out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return _record(Var(y), (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return _record(Var(a.value * mask), (a,), lambda g: (g * mask,))


def exp(a: Var) -> Var:
    y = np.exp(a.value)
    return _record(Var(y), (a,), lambda g: (g * y,))


def square(a: Var) -> Var:
    v = a.value
    return _record(Var(v * v), (a,), lambda g: (2.0 * g * v,))


def clip(a: Var, lo: float, hi: float) -> Var:
    v = a.value
    inside = (v >= lo) & (v <= hi)
    return _record(Var(np.clip(v, lo, hi)), (a,), lambda g: (g * inside,))


def sum_all(a: Var) -> Var:
    shape = a.value.shape
    return _record(Var(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Var) -> Var:
    shape, n = a.value.shape, a.value.size
    return _record(Var(a.value.mean()), (a,), lambda g: (np.full(shape, g / n),))


def sum_cols(a: Var) -> Var:
    """Row sums of a 2-D array, keeping a trailing axis of length 1."""
    shape = a.value.shape
    return _record(
        Var(a.value.sum(axis=1, keepdims=True)), (a,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def take_cols(a: Var, cols) -> Var:
    """Select columns of a 2-D array by slice or index array."""
    v = a.value
    out = Var(v[:, cols])

    def backward(g):
        full = np.zeros_like(v)
        if isinstance(cols, slice):
            full[:, cols] = g
        else:
            np.add.at(full, (slice(None), np.asarray(cols)), g)
        return (full,)

    return _record(out, (a,), backward)


def concat(parts: Sequence[Var]) -> Var:
    """Concatenate 2-D arrays along columns."""
    parts = [as_var(p) for p in parts]
    widths = [p.value.shape[1] for p in parts]
    out = Var(np.concatenate([p.value for p in parts], axis=1))
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _record(out, tuple(parts), backward)
