import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drmgf.numcore import (
    ContractError,
    Graph,
    NormFloorWarning,
    NumericError,
    Rng,
    dump_tensors,
    filter_normalize,
    finite_diff,
    grad,
    load_tensors,
)


# -- grad ------------------------------------------------------------------

def test_grad_square():
    g = Graph()
    x = g.param("x", np.array(3.0))
    assert grad(g, g.square(x))["x"] == pytest.approx(6.0)


def test_grad_constant_loss_is_zero():
    g = Graph()
    g.param("x", np.array([1.0, 2.0]))
    out = grad(g, g.const(np.array(5.0)))
    assert np.array_equal(out["x"], np.zeros(2))


def test_grad_product():
    g = Graph()
    x, y = g.param("x", np.array(2.0)), g.param("y", np.array(3.0))
    out = grad(g, x * y)
    assert (out["x"], out["y"]) == (pytest.approx(3.0), pytest.approx(2.0))


def test_grad_rejects_non_scalar_loss():
    g = Graph()
    x = g.param("x", np.ones(3))
    with pytest.raises(ContractError):
        grad(g, x * 2.0)


def test_grad_nan_names_the_node():
    g = Graph()
    x = g.param("x", np.array(-1.0))
    with np.errstate(invalid="ignore"), pytest.raises(NumericError, match="node"):
        grad(g, g.sqrt(x))


def test_grad_leaves_values_unchanged():
    g = Graph()
    x = g.param("x", np.array([1.0, -2.0]))
    loss = g.sum(g.square(g.relu(x)))
    before = loss.value.copy()
    grad(g, loss)
    assert np.array_equal(loss.value, before)


# -- finite differences -----------------------------------------------------

def test_finite_diff_square():
    (d,) = finite_diff(lambda p: float(p[0] ** 2), [np.array(3.0)], h=1e-5)
    assert abs(float(d) - 6.0) < 1e-8


def test_finite_diff_constant():
    (d,) = finite_diff(lambda p: 4.0, [np.zeros(3)])
    assert np.array_equal(d, np.zeros(3))


def test_finite_diff_sin():
    h = 1e-5
    (d,) = finite_diff(lambda p: math.sin(float(p[0])), [np.array(0.0)], h=h)
    # oracle: the central difference quotient itself, sin(h) / h
    assert float(d) == pytest.approx(math.sin(h) / h, abs=1e-12)
    assert float(d) == pytest.approx(1.0, abs=1e-9)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ContractError):
        finite_diff(lambda p: 0.0, [np.zeros(1)], h=0.0)


def _check_op(build, *shapes, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    params = [rng.normal(size=s) for s in shapes]
    if positive:
        params = [np.abs(p) + 0.5 for p in params]

    def value(ps):
        g = Graph()
        vs = [g.param(f"p{i}", p) for i, p in enumerate(ps)]
        return build(g, *vs)

    g = Graph()
    vs = [g.param(f"p{i}", p) for i, p in enumerate(params)]
    auto = grad(g, build(g, *vs))
    fd = finite_diff(lambda ps: value(ps).value.item(), params)
    for i, f in enumerate(fd):
        a = auto[f"p{i}"]
        assert np.linalg.norm(a - f) <= 1e-6 * max(1.0, np.linalg.norm(f))


OPS = {
    "add": (lambda g, a, b: g.sum(g.square(a + b)), (3, 2), (2,)),
    "sub": (lambda g, a, b: g.sum(g.square(a - b)), (3, 2), (3, 2)),
    "mul": (lambda g, a, b: g.sum(a * b * a), (4,), (4,)),
    "div": (lambda g, a, b: g.sum(a / b), (3,), (3,)),
    "matmul": (lambda g, a, b: g.sum(g.square(a @ b)), (2, 3), (3, 4)),
    "transpose": (lambda g, a: g.sum(g.transpose(a) @ a), (3, 2)),
    "relu": (lambda g, a: g.sum(g.square(g.relu(a))), (5,)),
    "sqrt": (lambda g, a: g.sum(g.sqrt(a)), (4,)),
    "mean": (lambda g, a: g.mean(g.square(a)), (2, 3)),
    "sum-axis": (lambda g, a: g.sum(g.square(g.sum(a, axis=1, keepdims=True))), (3, 4)),
    "reshape": (lambda g, a: g.sum(g.square(g.reshape(a, (6,)) * np.arange(6.0))), (2, 3)),
    "clamp": (lambda g, a: g.sum(g.clamp_min(a, 0.1)), (5,)),
    "mse": (lambda g, a, b: g.mse(a, b), (3, 2), (3, 2)),
    "xent": (lambda g, a: g.softmax_cross_entropy(a, np.array([0, 2, 1])), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    build, *shapes = OPS[name]
    _check_op(build, *shapes, positive=name in ("div", "sqrt"))


# -- filter normalization -----------------------------------------------------

def test_filter_normalize_three_four():
    w = np.array([3.0, 4.0]).reshape(1, 1, 1, 2)
    assert np.allclose(filter_normalize(w).ravel(), [0.6, 0.8], atol=1e-15)


def test_filter_normalize_unit_unchanged():
    w = np.array([0.6, 0.8]).reshape(1, 1, 1, 2)
    assert np.allclose(filter_normalize(w), w, atol=1e-15)


def test_filter_normalize_zero_slice_warns_and_stays_finite():
    w = np.zeros((2, 1, 1, 1))
    w[0] = 2.0
    with pytest.warns(NormFloorWarning):
        out = filter_normalize(w)
    assert np.all(np.isfinite(out)) and out[1].item() == 0.0 and out[0].item() == 1.0


filters = arrays(np.float64, (3, 2, 2, 2), elements=st.floats(-10, 10, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(filters, st.floats(1e-3, 1e3))
def test_filter_normalize_scale_and_idempotence(w, c):
    w = w + np.where(w >= 0, 0.1, -0.1)           # keep every slice away from zero
    once = filter_normalize(w)
    assert np.allclose(filter_normalize(c * w), once, rtol=0, atol=1e-12)
    assert np.allclose(filter_normalize(once), once, rtol=0, atol=1e-12)
    norms = np.sqrt((once ** 2).sum(axis=(2, 3)))
    assert np.allclose(norms, 1.0, atol=1e-12)


# -- rng and container ----------------------------------------------------------

def test_rng_reproducible_and_spawn_independent():
    a, b = Rng(42), Rng(42)
    assert np.array_equal(a.normal(5), b.normal(5))
    assert np.array_equal(Rng(42).spawn(1, 2).normal(3), Rng(42).spawn(1, 2).normal(3))
    assert not np.array_equal(Rng(42).spawn(1).normal(3), Rng(42).spawn(2).normal(3))


def test_rng_unknown_algorithm():
    with pytest.raises(ContractError):
        Rng(0, algorithm="mt19937")


def test_tensor_container_round_trip_and_layout():
    t = {"b": np.arange(6.0).reshape(2, 3), "a": np.array(1.5)}
    blob = dump_tensors(t)
    back = load_tensors(blob)
    assert set(back) == {"a", "b"}
    assert all(np.array_equal(back[k], t[k]) for k in t)
    # little-endian f64 payload of "b" ends the blob, row-major
    assert blob[-48:] == np.arange(6.0).astype("<f8").tobytes()


def test_tensor_container_rejects_garbage():
    with pytest.raises(ContractError):
        load_tensors(b"nope")
    with pytest.raises(ContractError):
        load_tensors(dump_tensors({"x": np.ones(2)}) + b"\0")
