"""Minimal reverse-mode automatic differentiation on numpy arrays.

A :class:`Tape` records every primitive applied to a :class:`Var` together
with the indices of its parents and a vector-Jacobian product per parent.
Operations on plain arrays bypass the tape entirely, so the same model code
runs in inference mode (numpy only) and in training mode (recorded).

Example
-------
>>> tape = Tape()
>>> w = tape.variable(np.array([1.0, 2.0]))
>>> loss = sum(w * w)
>>> tape.backward(loss, [w])[0]
array([2., 4.])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Node:
    op: str
    parents: tuple[int, ...]
    shape: tuple[int, ...]


class Var:
    """An array value living on a tape."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 1000

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(index={self.index}, shape={self.value.shape})"

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Append-only record of primitive operations.

    Nodes are stored in creation order, which is a topological order because
    a node can only be built from values that already exist.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._vjps: list[tuple[Callable, ...]] = []
        self.adjoints: list[np.ndarray | None] = []

    def __len__(self):
        return len(self.nodes)

    def variable(self, value) -> Var:
        """Register a leaf (typically a parameter)."""
        value = np.array(value, dtype=np.float64)
        return self._push("leaf", value, (), ())

    def _push(self, op, value, parents, vjps) -> Var:
        index = len(self.nodes)
        self.nodes.append(Node(op, tuple(p.index for p in parents), np.shape(value)))
        self._vjps.append(tuple(vjps))
        return Var(value, self, index)

    def backward(self, loss: Var, wrt: Sequence[Var] = ()) -> list[np.ndarray]:
        """Populate adjoints from ``loss`` and return gradients for ``wrt``.

        Variables not connected to ``loss`` receive zero gradients.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ValueError("loss must be a Var recorded on this tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
        adj: list[np.ndarray | None] = [None] * len(self.nodes)
        adj[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            for p, vjp in zip(self.nodes[i].parents, self._vjps[i]):
                if vjp is None:
                    continue
                gp = vjp(g)
                adj[p] = gp if adj[p] is None else adj[p] + gp
        self.adjoints = adj
        grads = []
        for v in wrt:
            g = adj[v.index]
            grads.append(np.zeros_like(v.value) if g is None else g)
        return grads

    def reset(self):
        self.nodes.clear()
        self._vjps.clear()
        self.adjoints = []


def value_of(x):
    """Underlying array of a Var, or the argument itself."""
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(op, a, b, fwd, da, db):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = fwd(av, bv)
    if tape is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        sa = np.shape(av)
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(da(g, av, bv, out), sa))
    if isinstance(b, Var):
        sb = np.shape(bv)
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(db(g, av, bv, out), sb))
    return tape._push(op, out, parents, vjps)


def _unary(op, a, fwd, da):
    if not isinstance(a, Var):
        return fwd(a)
    av = a.value
    out = fwd(av)
    return a.tape._push(op, out, (a,), (lambda g: da(g, av, out),))


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    return _binary("add", a, b, np.add, lambda g, *_: g, lambda g, *_: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g, *_: g, lambda g, *_: -g)


def mul(a, b):
    return _binary(
        "mul", a, b, np.multiply,
        lambda g, av, bv, o: g * bv,
        lambda g, av, bv, o: g * av,
    )


def div(a, b):
    return _binary(
        "div", a, b, np.divide,
        lambda g, av, bv, o: g / bv,
        lambda g, av, bv, o: -g * o / bv,
    )


def neg(a):
    return _unary("neg", a, np.negative, lambda g, av, o: -g)


def power(a, exponent: float):
    if isinstance(exponent, Var):
        raise TypeError("only constant exponents are supported")
    p = float(exponent)
    return _unary("pow", a, lambda v: v ** p, lambda g, av, o: g * p * av ** (p - 1.0))


def exp(a):
    return _unary("exp", a, np.exp, lambda g, av, o: g * o)


def log(a):
    return _unary("log", a, np.log, lambda g, av, o: g / av)


def sqrt(a):
    return _unary("sqrt", a, np.sqrt, lambda g, av, o: 0.5 * g / o)


def tanh(a):
    return _unary("tanh", a, np.tanh, lambda g, av, o: g * (1.0 - o * o))


def _sigmoid(v):
    return expit(v)


def sigmoid(a):
    return _unary("sigmoid", a, _sigmoid, lambda g, av, o: g * o * (1.0 - o))


def sin(a):
    return _unary("sin", a, np.sin, lambda g, av, o: g * np.cos(av))


def cos(a):
    return _unary("cos", a, np.cos, lambda g, av, o: -g * np.sin(av))


def maximum(a, floor: float):
    """Elementwise max against a constant floor; gradient passes where a > floor."""
    return _unary("maximum", a, lambda v: np.maximum(v, floor), lambda g, av, o: g * (av > floor))


def wrap_angle(a):
    """Reduce angles to [-pi, pi). Piecewise identity, so the gradient is 1."""
    return _unary("wrap", a, _wrap, lambda g, av, o: g)


def _wrap(v):
    w = v - TWO_PI * np.floor((v + np.pi) / TWO_PI)
    # rounding can land exactly on +pi
    return np.where(w >= np.pi, w - TWO_PI, w)


# -- reductions and linear algebra ------------------------------------------

def matmul(a, b):
    def da(g, av, bv, o):
        if bv.ndim == 1:
            return np.multiply.outer(g, bv)
        return g @ np.swapaxes(bv, -1, -2)

    def db(g, av, bv, o):
        if bv.ndim == 2 and av.ndim >= 2:
            k = av.shape[-1]
            return av.reshape(-1, k).T @ g.reshape(-1, bv.shape[-1])
        if bv.ndim == 1:
            return np.tensordot(av, g, axes=(tuple(range(av.ndim - 1)), tuple(range(g.ndim))))
        return np.swapaxes(av, -1, -2) @ g

    return _binary("matmul", a, b, np.matmul, da, db)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    if not isinstance(a, Var):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.value.shape

    def vjp(g, av, o):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _unary("sum", a, lambda v: np.sum(v, axis=axis, keepdims=keepdims), vjp)


def mean(a, axis=None, keepdims=False):
    n = np.size(value_of(a)) if axis is None else np.shape(value_of(a))[axis]
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def logsumexp(a, axis=None):
    """Stable log(sum(exp(a))) along ``axis`` (all entries when None)."""
    def fwd(v):
        m = np.max(v, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        s = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
        return s.reshape(()) if axis is None else np.squeeze(s, axis=axis)

    def vjp(g, av, o):
        oo = o if axis is None else np.expand_dims(o, axis)
        gg = g if axis is None else np.expand_dims(g, axis)
        return gg * np.exp(av - oo)

    return _unary("logsumexp", a, fwd, vjp)


def reshape(a, shape):
    if not isinstance(a, Var):
        return np.reshape(a, shape)
    old = a.value.shape
    return _unary("reshape", a, lambda v: np.reshape(v, shape), lambda g, av, o: g.reshape(old))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    if not isinstance(a, Var):
        return a[idx]
    shape = a.value.shape
    basic = _is_basic_index(idx)

    def vjp(g, av, o):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return out

    return _unary("gather", a, lambda v: v[idx], vjp)


def concat(items: Sequence, axis: int = 0):
    tape = _tape_of(*items)
    vals = [value_of(x) for x in items]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [np.shape(v)[ax] for v in vals])
    parents, vjps = [], []
    for i, x in enumerate(items):
        if isinstance(x, Var):
            sl = [slice(None)] * out.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            sl = tuple(sl)
            parents.append(x)
            vjps.append(lambda g, sl=sl: g[sl])
    return tape._push("concat", out, parents, vjps)


def stack(items: Sequence, axis: int = 0):
    tape = _tape_of(*items)
    vals = [np.asarray(value_of(x), dtype=np.float64) for x in items]
    out = np.stack(vals, axis=axis)
    if tape is None:
        return out
    ax = axis % out.ndim
    parents, vjps = [], []
    for i, x in enumerate(items):
        if isinstance(x, Var):
            parents.append(x)
            vjps.append(lambda g, i=i: np.take(g, i, axis=ax))
    return tape._push("stack", out, parents, vjps)


def lstm_cell(gates, c_prev=None):
    """Fused LSTM update from pre-activations ``gates[B, 4H]`` (order i, f, g, o).

    Returns ``concat([h, c], -1)`` of shape ``[B, 2H]``; ``c_prev=None`` is a
    zero cell state.
    """
    gv = value_of(gates)
    H = gv.shape[-1] // 4
    cv = np.zeros(gv.shape[:-1] + (H,)) if c_prev is None else value_of(c_prev)
    sig = expit(gv)
    i_g, f_g, o_g = sig[..., :H], sig[..., H:2 * H], sig[..., 3 * H:]
    g_g = np.tanh(gv[..., 2 * H:3 * H])
    c = f_g * cv + i_g * g_g
    tc = np.tanh(c)
    out = np.concatenate([o_g * tc, c], axis=-1)
    tape = _tape_of(gates, c_prev)
    if tape is None:
        return out

    def dc_total(g):
        return g[..., H:] + g[..., :H] * o_g * (1.0 - tc * tc)

    def d_gates(g):
        dc = dc_total(g)
        return np.concatenate([
            dc * g_g * i_g * (1.0 - i_g),
            dc * cv * f_g * (1.0 - f_g),
            dc * i_g * (1.0 - g_g * g_g),
            g[..., :H] * tc * o_g * (1.0 - o_g),
        ], axis=-1)

    parents, vjps = [], []
    if isinstance(gates, Var):
        parents.append(gates)
        vjps.append(d_gates)
    if isinstance(c_prev, Var):
        parents.append(c_prev)
        vjps.append(lambda g: dc_total(g) * f_g)
    return tape._push("lstm_cell", out, parents, vjps)


def where(mask, a, b):
    """Select with a constant boolean mask."""
    mask = np.asarray(mask)
    return _binary(
        "where", a, b,
        lambda av, bv: np.where(mask, av, bv),
        lambda g, av, bv, o: g * mask,
        lambda g, av, bv, o: g * ~mask,
    )
