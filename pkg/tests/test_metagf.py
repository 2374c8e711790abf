import logging

import numpy as np
import pytest

from drmgf.config import RunConfig, lr_at
from drmgf.data import Dataset
from drmgf.metagf import (
    ablation_variant,
    fuse_gradients,
    fused_update,
    fusion_weights,
    meta_loss_value,
    meta_step,
    run_drmgf,
    run_method,
)
from drmgf.model import ImportanceSet, LayerWeights, MultiOutputModel, init_importances
from drmgf.numcore import ContractError, Rng
from drmgf.toy import ToyData, ToyModel, toy_config
from drmgf.trainers import SgdState, TaskGradient, average_fuse, joint_sgd_step, single_task_sgd_step

from conftest import single_task_model, small_config


# -- fusion -----------------------------------------------------------------------------

def test_equal_importance_gives_mean():
    nu = np.array([[0.3, 2.0]])
    gs = [np.array([[1.0, 4.0]]), np.array([[3.0, -2.0]])]
    fused, nfall = fuse_gradients([nu, nu], gs)
    assert np.allclose(fused, [[2.0, 1.0]], atol=1e-15) and nfall == 0


def test_one_hot_importance_selects_task():
    fused, _ = fuse_gradients([np.array([[0.0]]), np.array([[5.0]])], [np.array([[7.0]]), np.array([[-1.0]])])
    assert fused.item() == -1.0


def test_worked_fusion_example():
    # (2 * 3 + 1 * (-3)) / 3 = 1
    fused, _ = fuse_gradients([np.array([[2.0]]), np.array([[1.0]])], [np.array([[3.0]]), np.array([[-3.0]])])
    assert fused.item() == pytest.approx(1.0, abs=1e-15)


def test_all_zero_filter_falls_back_to_mean(caplog):
    nus = [np.array([[0.0, 1.0]]), np.array([[0.0, 3.0]])]
    gs = [np.array([[2.0, 4.0]]), np.array([[4.0, 8.0]])]
    with caplog.at_level(logging.INFO, logger="drmgf.metagf"):
        fused, nfall = fuse_gradients(nus, gs)
    assert nfall == 1 and "fell back" in caplog.text
    assert np.allclose(fused, [[3.0, 7.0]], atol=1e-15)


def test_fusion_broadcasts_over_filter_dims():
    nus = [np.array([[1.0]]), np.array([[3.0]])]
    gs = [np.ones((1, 1, 2, 2)), np.zeros((1, 1, 2, 2))]
    fused, _ = fuse_gradients(nus, gs)
    assert np.allclose(fused, 0.25)
    with pytest.raises(ContractError):
        fuse_gradients([np.ones((2, 1))], [np.ones((1, 1, 2, 2))])


def test_fusion_weights_sum_to_one():
    w, dead = fusion_weights([Rng(0).uniform((3, 4)) for _ in range(3)])
    assert np.allclose(np.sum(w, axis=0), 1.0) and not dead.any()


def test_equal_importance_fusion_equals_average(small_model, small_data):
    imp = init_importances(small_model, Rng(0), "kaiming-abs")
    from drmgf.trainers import disentangle_epoch

    tgs = [disentangle_epoch(small_model, imp, k, small_data.batches(0, 0, 32)[:2], RunConfig())[1]
           for k in range(small_model.K)]
    eq = imp.copy()
    for l in range(len(small_model.shared)):
        for k in small_model.users(l):
            eq.nu[k][l] = imp.nu[small_model.users(l)[0]][l]
    weighted, wb, _ = fused_update(small_model, eq, tgs, average=False)
    plain, pb, _ = fused_update(small_model, eq, tgs, average=True)
    for l in range(len(small_model.shared)):
        assert np.allclose(weighted[l], plain[l], rtol=0, atol=1e-15)
        assert np.allclose(wb[l], pb[l], rtol=0, atol=1e-15)


# -- meta step ----------------------------------------------------------------------------

class _Scalar(MultiOutputModel):
    """One shared scalar weight w; task k's loss is 0.5 * (w - target_k)**2."""

    def task_loss(self, g, out, y):
        return g.mul(g.sum(g.square(g.sub(out, np.asarray(y, dtype=float).reshape(-1, 1)))), 0.5)

    def copy(self):
        m = super().copy()
        return _Scalar(m.shared, m.heads, m.attach, m.kind)


def _scalar_problem(nu0, nu1):
    one = np.ones((1, 1, 1, 1))
    model = _Scalar([LayerWeights(np.zeros((1, 1, 1, 1)))], [[LayerWeights(one.copy())], [LayerWeights(one.copy())]],
                    [1, 1])
    targets = np.array([1.0, 4.0])           # fused point stays in the ReLU's active region
    # w0 = 0; each task's expected gradient points from w0 to its own minimizer
    tgs = [TaskGradient(k, {0: (0.0 - targets[k]) * one}, {}, {}, {}, []) for k in range(2)]
    imp = ImportanceSet([[np.array([[nu0]])], [np.array([[nu1]])]])
    batch = (np.ones((1, 1)), targets[None, :])
    return model, imp, tgs, batch


def test_meta_zero_steps_is_noop():
    model, imp, tgs, batch = _scalar_problem(0.9, 0.1)
    out, info = meta_step(imp, tgs, model, batch, lr=0.1, n_meta=0)
    assert out is imp and info.steps == 0


def test_meta_single_user_layers_change_nothing():
    model = single_task_model(Rng(0))
    imp = ImportanceSet([[np.ones((5, 4))]])
    tg = TaskGradient(0, {0: np.ones((5, 4, 1, 1))}, {0: np.zeros(5)}, {}, {}, [])
    out, _ = meta_step(imp, [tg], model, (np.ones((2, 4)), np.zeros((2, 1), int)), lr=1.0)
    assert np.array_equal(out.nu[0][0], imp.nu[0][0])


def test_meta_moves_fused_point_toward_grid_optimum():
    model, imp, tgs, batch = _scalar_problem(0.9, 0.1)
    # oracle: grid search over the normalized weight of task 0
    grid = np.linspace(0, 1, 10001)
    point = grid * 1.0 + (1 - grid) * 4.0
    F = 0.5 * (point - 1.0) ** 2 + 0.5 * (point - 4.0) ** 2
    best = grid[np.argmin(F)]
    assert best == pytest.approx(0.5, abs=1e-4)
    losses, share = [meta_loss_value(model, imp, tgs, batch)], [0.9]
    for _ in range(30):
        imp, info = meta_step(imp, tgs, model, batch, lr=0.5)
        losses.append(meta_loss_value(model, imp, tgs, batch))
        share.append(imp.nu[0][0].item() / (imp.nu[0][0].item() + imp.nu[1][0].item()))
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))
    assert abs(share[-1] - best) < abs(share[0] - best) and abs(share[-1] - best) < 0.05


def test_meta_step_backtracking_never_increases_loss(small_model, small_data):
    from drmgf.trainers import disentangle_epoch

    imp = init_importances(small_model, Rng(1), "kaiming-abs-independent")
    tgs = [disentangle_epoch(small_model, imp, k, small_data.batches(0, 0, 32)[:3], RunConfig())[1]
           for k in range(small_model.K)]
    batch = small_data.meta_batch(0, 0, 64)
    for routed in (False, True):
        out, info = meta_step(imp, tgs, small_model, batch, lr=50.0, n_meta=3, routed=routed)
        assert info.loss_after <= info.loss_before
        assert all(np.all(v >= 0) for row in out.nu for v in row if v is not None)


# -- driver ------------------------------------------------------------------------------------

def test_zero_epochs_returns_model_unchanged(small_model, small_data):
    res = run_drmgf(RunConfig(max_iter=0), small_data, small_model)
    assert res.reports == []
    assert all(np.array_equal(res.model.tensors()[n], t) for n, t in small_model.tensors().items())


def _single_task_data(rng, n=48):
    X = rng.normal((n, 4))
    Y = rng.integers(3, size=(n, 1))
    return Dataset(X, Y, X[:8], Y[:8], [3])


def test_single_task_identity_route_tracks_sgd():
    rng = Rng(21)
    model = single_task_model(rng)
    data = _single_task_data(rng)
    cfg = RunConfig(method="dr-mgf", max_iter=4, batch_size=8, lam=0.0, beta=0.0)
    traj = []
    run_method(cfg, data, model, route="identity",
               on_epoch=lambda r, rep: traj.append(r.model.shared[0].w.copy()))
    ref = model.copy()
    state = SgdState(cfg.lr, cfg.momentum, cfg.weight_decay)
    for epoch in range(cfg.max_iter):
        state.lr = lr_at(cfg.lr, epoch, cfg.max_iter, cfg.milestones, cfg.lr_factor)
        for batch in data.batches(epoch, cfg.seed, cfg.batch_size):
            single_task_sgd_step(ref, 0, batch, state)
        assert np.max(np.abs(traj[epoch] - ref.shared[0].w)) <= 1e-9


def test_sgd_joint_variant_reproduces_step_loop(small_model, small_data):
    cfg = RunConfig(method="sgd-joint", max_iter=2, batch_size=32)
    res = ablation_variant(cfg)(small_data, small_model)
    ref = small_model.copy()
    state = SgdState(cfg.lr, cfg.momentum, cfg.weight_decay)
    for epoch in range(2):
        state.lr = lr_at(cfg.lr, epoch, 2)
        for batch in small_data.batches(epoch, cfg.seed, cfg.batch_size):
            joint_sgd_step(ref, batch, state)
    assert all(np.array_equal(res.model.tensors()[n], t) for n, t in ref.tensors().items())


def test_avgf_and_mgf_share_epoch_zero_task_gradients(small_model, small_data):
    out = {}
    for method in ("dr-mgf", "dr-avgf"):
        cfg = RunConfig(method=method, max_iter=1, batch_size=32)
        out[method] = run_method(cfg, small_data, small_model, keep_task_gradients=True).task_gradients[0]
    for a, b in zip(out["dr-mgf"], out["dr-avgf"]):
        assert all(a.shared[l].tobytes() == b.shared[l].tobytes() for l in a.shared)
        assert all(a.nu[l].tobytes() == b.nu[l].tobytes() for l in a.nu)


def test_run_is_deterministic(small_model, small_data):
    cfg = RunConfig(method="dr-mgf", max_iter=2, batch_size=32)
    a, b = (run_method(cfg, small_data, small_model) for _ in range(2))
    assert all(a.model.tensors()[n].tobytes() == t.tobytes() for n, t in b.model.tensors().items())
    assert [r.train_loss for r in a.reports] == [r.train_loss for r in b.reports]


def test_unknown_variant():
    with pytest.raises(ContractError):
        ablation_variant(RunConfig.from_dict({**RunConfig().to_dict(), "method": "mgda"}))


def test_meta_gf_only_slower_than_drmgf_on_toy():
    def epochs_to(method, tol=1e-3, epochs=600):
        worst = []
        run_method(toy_config(method, epochs), ToyData(), ToyModel(),
                   on_epoch=lambda r, rep: worst.append(max(rep.train_loss)))
        hit = [e for e, v in enumerate(worst) if v < tol]
        return hit[0] if hit else epochs + 1

    assert epochs_to("dr-mgf") < epochs_to("meta-gf-only")
