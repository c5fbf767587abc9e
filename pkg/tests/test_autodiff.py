"""Adjoint vs central-difference checks for every tape primitive."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from socpath.nn import autodiff as ad

H = 1e-4
TOL = 1e-6


def fd_gradient(f, x, h=H):
    """Fourth-order central differences; truncation error O(h^4)."""
    g = np.zeros_like(x)

    def at(idx, d):
        xs = x.copy()
        xs[idx] += d
        return f(xs)

    for idx in np.ndindex(x.shape):
        g[idx] = (8 * (at(idx, h) - at(idx, -h)) - (at(idx, 2 * h) - at(idx, -2 * h))) / (12 * h)
    return g


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def check(fn, *arrays, weights_seed=0):
    """Contract fn(*arrays) with fixed random weights and compare gradients of every input."""
    out_shape = np.shape(fn(*arrays))
    w = np.random.default_rng(weights_seed).normal(size=out_shape)

    def scalar(*xs):
        return float(np.sum(w * fn(*xs)))

    tape = ad.Tape()
    vars_ = [tape.variable(a) for a in arrays]
    loss = ad.sum(fn(*vars_) * w)
    grads = tape.backward(loss, vars_)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            xs = list(arrays)
            xs[i] = x
            return scalar(*xs)
        num = fd_gradient(f, a)
        assert rel_err(grads[i], num) < TOL, f"input {i}: {rel_err(grads[i], num)}"


shapes = st.tuples(st.integers(1, 4), st.integers(1, 4))
seeds = st.integers(0, 10_000)


def arr(seed, shape, lo=-1.5, hi=1.5):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


UNARY = {
    "exp": ad.exp,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "sin": ad.sin,
    "cos": ad.cos,
    "neg": ad.neg,
    "square": lambda a: a * a,
    "power3": lambda a: ad.power(a, 3.0),
    "sum0": lambda a: ad.sum(a, axis=0),
    "mean1": lambda a: ad.mean(a, axis=-1),
    "logsumexp": lambda a: ad.logsumexp(a, axis=-1),
    "reshape": lambda a: ad.reshape(a, (-1,)),
    "gather": lambda a: a[..., ::-1][:1],
    "fancy": lambda a: a[np.array([0, 0])],
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(shape=shapes, seed=seeds)
@settings(max_examples=15, deadline=None)
def test_unary_primitives(name, shape, seed):
    check(UNARY[name], arr(seed, shape))


@pytest.mark.parametrize("name", ["log", "sqrt"])
@given(shape=shapes, seed=seeds)
@settings(max_examples=15, deadline=None)
def test_positive_domain_primitives(name, shape, seed):
    check(getattr(ad, name), arr(seed, shape, 0.5, 2.0))


BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "concat": lambda a, b: ad.concat([a, b], axis=-1),
    "stack": lambda a, b: ad.stack([a, b], axis=0),
    "where": lambda a, b: ad.where(np.eye(*np.shape(ad.value_of(a)), dtype=bool), a, b),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@given(shape=shapes, seed=seeds)
@settings(max_examples=15, deadline=None)
def test_binary_primitives(name, shape, seed):
    check(BINARY[name], arr(seed, shape), arr(seed + 1, shape))


@given(n=st.integers(1, 4), k=st.integers(1, 4), m=st.integers(1, 4), seed=seeds)
@settings(max_examples=20, deadline=None)
def test_matmul(n, k, m, seed):
    check(lambda a, b: a @ b, arr(seed, (n, k)), arr(seed + 1, (k, m)))


@given(shape=shapes, seed=seeds)
@settings(max_examples=15, deadline=None)
def test_broadcasting(shape, seed):
    check(lambda a, b: a * b + b, arr(seed, shape), arr(seed + 1, (shape[1],)))


def test_maximum_away_from_kink():
    x = np.array([[0.2, 1.5], [0.9, 2.0]])
    check(lambda a: ad.maximum(a, 0.5), x)


def test_wrap_angle_identity_gradient():
    x = np.array([[0.3, -2.0], [5.0, -4.0]])
    check(ad.wrap_angle, x)


@given(seed=seeds, h=st.integers(1, 3))
@settings(max_examples=15, deadline=None)
def test_lstm_cell(seed, h):
    check(ad.lstm_cell, arr(seed, (3, 4 * h)), arr(seed + 1, (3, h)))
    check(lambda g: ad.lstm_cell(g), arr(seed, (2, 4 * h)))


def test_quadratic_gradient():
    tape = ad.Tape()
    p = tape.variable(np.array([1.0, -2.0, 3.0]))
    (g,) = tape.backward(ad.sum(p * p), [p])
    np.testing.assert_array_equal(g, 2 * np.array([1.0, -2.0, 3.0]))


def test_disconnected_and_constant():
    tape = ad.Tape()
    p = tape.variable(np.ones(3))
    q = tape.variable(np.ones(2))
    loss = ad.sum(p * 2.0)
    gp, gq = tape.backward(loss, [p, q])
    np.testing.assert_array_equal(gq, 0.0)
    c = tape.variable(np.array(5.0))
    (g,) = tape.backward(c * 1.0 + 0.0, [p])
    np.testing.assert_array_equal(g, 0.0)


def test_nonscalar_loss_rejected():
    tape = ad.Tape()
    p = tape.variable(np.ones(3))
    with pytest.raises(ValueError):
        tape.backward(p * 2.0, [p])


def test_topological_order_and_reset():
    tape = ad.Tape()
    p = tape.variable(np.ones(2))
    ad.sum(ad.tanh(p) * p)
    for i, node in enumerate(tape.nodes):
        assert all(j < i for j in node.parents)
    tape.reset()
    assert len(tape) == 0


def test_plain_arrays_bypass_tape():
    out = ad.tanh(np.array([0.0, 1.0]))
    assert isinstance(out, np.ndarray)
