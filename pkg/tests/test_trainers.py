import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from drmgf.config import RunConfig, lr_at
from drmgf.model import (
    ImportanceSet,
    LayerWeights,
    MultiOutputModel,
    effective_weights,
    init_importances,
    lateral_normalize,
)
from drmgf.numcore import ContractError, NumericError, Rng
from drmgf.toy import ToyData, ToyModel, toy_config, toy_matrices
from drmgf.trainers import (
    AuxWeights,
    SgdState,
    average_fuse,
    disentangle_epoch,
    joint_sgd_step,
    pcgrad_fuse,
    single_task_sgd_step,
)

from conftest import single_task_model


# -- disentanglement epoch ----------------------------------------------------------

def test_zero_steps_identity_importance_gives_zero_gradient(small_model):
    cfg = RunConfig(max_iter=1)
    imp = init_importances(small_model, Rng(0), "identity")
    for route in ("nu", "identity", "plain"):
        _, tg = disentangle_epoch(small_model, imp, 1, [], cfg, route=route)
        assert tg.steps == 0
        for g in tg.shared.values():
            assert np.max(np.abs(g)) <= 1e-12


def test_zero_aux_weight_ignores_other_heads(small_model, small_data):
    cfg = RunConfig(max_iter=1, beta=0.0)
    imp = init_importances(small_model, Rng(0))
    batches = small_data.batches(0, 0, 32)[:3]
    _, a = disentangle_epoch(small_model, imp, 0, batches, cfg)
    other = small_model.copy()
    other.heads[2][0].w *= -3.0                     # task 2's head cannot matter when beta = 0
    _, b = disentangle_epoch(other, imp, 0, batches, cfg)
    assert all(np.array_equal(a.shared[l], b.shared[l]) for l in a.shared)


def test_disentangle_leaves_snapshot_untouched(small_model, small_data):
    before = {k: v.copy() for k, v in small_model.tensors().items()}
    imp = init_importances(small_model, Rng(0))
    nu0 = imp.copy()
    disentangle_epoch(small_model, imp, 2, small_data.batches(0, 0, 32), RunConfig(max_iter=1))
    assert all(np.array_equal(before[k], v) for k, v in small_model.tensors().items())
    assert np.array_equal(nu0.nu[2][0], imp.nu[2][0])


def test_task_gradient_recomputable(small_model, small_data):
    imp = init_importances(small_model, Rng(0))
    nu, tg = disentangle_epoch(small_model, imp, 1, small_data.batches(0, 0, 32), RunConfig(max_iter=1))
    for l, g in tg.shared.items():
        expect = small_model.shared[l].w - effective_weights(tg.w_end[l], tg.nu[l], imp.eps)
        assert np.array_equal(g, expect)
        assert np.all(nu[l] >= 0)


def test_one_step_matches_scripted_replay():
    """One disentanglement step of toy task 0 against a hand-written replay of
    the forward pass, the chain rule through the normalization, and SGD."""
    cfg = RunConfig.from_dict({**toy_config("dr-mgf", 1).to_dict(), "lam": 0.01, "weight_decay": 0.05,
                               "weight_decay_nu": 0.02, "eps": 1e-4})
    model = ToyModel(w=[0.7, -0.4], theta=[0.3, -0.2])
    nu = np.array([[0.8, 1.3]])
    imp = ImportanceSet([[nu.copy()], [nu.copy()]], cfg.eps)
    _, tg = disentangle_epoch(model, imp, 0, ToyData(1).batches(0, 0, 1), cfg, epoch=0)

    # replay
    A, b, c = toy_matrices(0)
    w, theta, eps, lam = np.array([0.7, -0.4]), 0.3, cfg.eps, cfg.lam
    lr, lr_nu = cfg.lr, cfg.lr_nu
    v = nu.ravel()
    sgn = np.sign(w)
    D = np.sqrt(eps + 0.1 * v.sum())
    e = v / D * sgn
    r = A @ e + b * theta - c
    u = sgn * (A.T @ r)
    dv = u / D - (u @ v) * 0.05 / D**3 + 2 * lam * v
    dtheta = b @ r
    w1 = w - lr * cfg.weight_decay * w              # the direction w/|w| of a 1x1 filter has zero gradient
    theta1 = theta - lr * (dtheta + cfg.weight_decay * theta)
    v1 = np.maximum(v - lr_nu * (dv + cfg.weight_decay_nu * v), 0.0)
    D1 = np.sqrt(eps + 0.1 * v1.sum())
    g = w - v1 / D1 * np.sign(w1)

    assert np.allclose(tg.nu[0].ravel(), v1, rtol=0, atol=1e-14)
    assert np.allclose(tg.w_end[0].ravel(), w1, rtol=0, atol=1e-15)
    assert np.allclose(tg.shared[0].ravel(), g, rtol=0, atol=1e-14)
    assert tg.head_delta[0][0].item() == pytest.approx(theta1 - theta, abs=1e-15)


def test_identity_route_equals_single_task_sgd():
    """K=1, lambda=0, beta=0, importance pinned to the filter norms: one epoch
    of disentanglement is plain SGD on w."""
    rng = Rng(11)
    model = single_task_model(rng)
    X = rng.normal((40, 4))
    Y = rng.integers(3, size=(40, 1))
    batches = [(X[i:i + 8], Y[i:i + 8]) for i in range(0, 40, 8)]
    cfg = RunConfig(max_iter=4, lam=0.0, beta=0.0)
    _, tg = disentangle_epoch(model, None, 0, batches, cfg, epoch=0, route="identity")

    ref = model.copy()
    state = SgdState(lr_at(cfg.lr, 0, cfg.max_iter), cfg.momentum, cfg.weight_decay)
    for batch in batches:
        single_task_sgd_step(ref, 0, batch, state)
    assert np.max(np.abs(tg.w_end[0] - ref.shared[0].w)) <= 1e-9
    assert np.max(np.abs(model.heads[0][0].w + tg.head_delta[0][0] - ref.heads[0][0].w)) <= 1e-9


def test_disentangle_is_deterministic(small_model, small_data):
    imp = init_importances(small_model, Rng(0))
    runs = [disentangle_epoch(small_model, imp, 2, small_data.batches(3, 1, 32), RunConfig(max_iter=4))[1]
            for _ in range(2)]
    assert all(runs[0].shared[l].tobytes() == runs[1].shared[l].tobytes() for l in runs[0].shared)


def test_disentangle_nan_names_the_batch(small_model, small_data):
    X, Y = small_data.batches(0, 0, 32)[0]
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(NumericError, match="batch 1"):
        disentangle_epoch(small_model, None, 0, [(X, Y), (bad, Y)], RunConfig(), route="plain")


def test_disentangle_contracts(small_model):
    with pytest.raises(ContractError):
        disentangle_epoch(small_model, None, 7, [], RunConfig())
    with pytest.raises(ContractError):
        disentangle_epoch(small_model, None, 0, [], RunConfig(), route="nu")


def test_aux_weights_contract():
    assert AuxWeights.uniform(3, 1, 0.4).beta == (0.4, 0.0, 0.4)
    with pytest.raises(ContractError):
        AuxWeights(1.0, (0.6,))
    with pytest.raises(ContractError):
        AuxWeights(2.0, ())


# -- joint baselines --------------------------------------------------------------------

class _LinearLossModel(MultiOutputModel):
    """Task loss = label * sum(outputs): the label column sets the gradient sign."""

    def task_loss(self, g, logits, y):
        return g.mul(g.sum(logits), float(y[0]))

    def copy(self):
        m = super().copy()
        return _LinearLossModel(m.shared, m.heads, m.attach, m.kind)


def _twin_heads(sign: float):
    rng = Rng(4)
    shared = [LayerWeights(rng.normal((3, 2, 1, 1)), np.zeros(3))]
    head = rng.normal((2, 3, 1, 1))
    heads = [[LayerWeights(head.copy(), np.zeros(2))], [LayerWeights(head.copy(), np.zeros(2))]]
    X = rng.normal((5, 2))
    Y = np.tile([[1.0, sign]], (5, 1))
    return _LinearLossModel(shared, heads, [1, 1]), (X, Y)


def test_joint_step_opposite_gradients_cancel():
    m, batch = _twin_heads(-1.0)
    w0 = m.shared[0].w.copy()
    joint_sgd_step(m, batch, SgdState(0.1))
    assert np.array_equal(m.shared[0].w, w0)


def test_joint_step_identical_gradients_double():
    m, batch = _twin_heads(1.0)
    single = m.copy()
    single_task_sgd_step(single, 0, batch, SgdState(0.1))    # step -eta * g on the shared weights
    w0 = m.shared[0].w.copy()
    joint_sgd_step(m, batch, SgdState(0.1))
    assert np.allclose(m.shared[0].w - w0, 2 * (single.shared[0].w - w0), rtol=0, atol=1e-15)


def test_joint_step_single_task_is_sgd():
    rng = Rng(5)
    model = single_task_model(rng)
    batch = (rng.normal((6, 4)), rng.integers(3, size=(6, 1)))
    a, b = model.copy(), model.copy()
    sa, sb = SgdState(0.05, 0.9, 1e-4), SgdState(0.05, 0.9, 1e-4)
    for _ in range(3):
        joint_sgd_step(a, batch, sa)
        single_task_sgd_step(b, 0, batch, sb)
    assert all(np.array_equal(a.tensors()[n], b.tensors()[n]) for n in a.tensors())


def test_pcgrad_examples():
    g1, g2 = np.array([1.0, 0.0]), np.array([-1.0, 1.0])
    # g1 -> g1 - (g1.g2 / |g2|^2) g2 = (0.5, 0.5); g2 -> g2 - (g2.g1 / |g1|^2) g1 = (0, 1)
    assert np.allclose(pcgrad_fuse([g1, g2]), [0.25, 0.75], atol=1e-15)
    a, b = np.array([1.0, 2.0]), np.array([2.0, 0.5])
    assert np.allclose(pcgrad_fuse([a, b]), (a + b) / 2, atol=1e-15)
    assert np.allclose(pcgrad_fuse([a, a]), a, atol=1e-15)
    with pytest.raises(ContractError):
        pcgrad_fuse([a])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (2, 4), elements=st.floats(-5, 5)))
def test_pcgrad_fused_agrees_with_surgered_inputs(G):
    g1, g2 = G
    if min(g1 @ g1, g2 @ g2) < 1e-6:
        return
    fused = pcgrad_fuse([g1, g2])
    s1 = g1 - min(0.0, g1 @ g2) / (g2 @ g2) * g2
    s2 = g2 - min(0.0, g2 @ g1) / (g1 @ g1) * g1
    assert fused @ s1 >= -1e-9 and fused @ s2 >= -1e-9


def test_average_fuse_examples():
    g = np.array([1.0, -2.0])
    assert np.array_equal(average_fuse([g]), g)
    assert np.array_equal(average_fuse([g, -g]), np.zeros(2))
    assert average_fuse([np.array([2.0]), np.array([4.0])]).item() == 3.0
    with pytest.raises(ContractError):
        average_fuse([])


def test_sgd_state_momentum_and_decay():
    p = {"x": np.array([1.0])}
    s = SgdState(0.1, 0.9, 0.5)
    s.step(p, {"x": np.array([2.0])})          # d = 2 + 0.5 = 2.5
    assert p["x"].item() == pytest.approx(0.75)
    s.step(p, {"x": np.array([2.0])})          # d = 2.375, v = 0.9 * 2.5 + 2.375
    assert p["x"].item() == pytest.approx(0.75 - 0.1 * (2.25 + 2.375))
