"""Meta-weighted gradient fusion and the epoch-level training driver.

One outer epoch: every task trains a private copy from the snapshot ``w0``
(disentanglement), the expected task gradients are fused per filter with
weights proportional to the tasks' importance variables, the importance
variables take meta steps on the joint loss at ``w0 - g``, and finally
``w0 <- w0 - g`` with the updated weights.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Callable

import numpy as np

from .config import METHODS, RunConfig, lr_at
from .model import (
    ImportanceSet,
    MultiOutputModel,
    bind,
    forward_task,
    init_importances,
    lateral_normalize_var,
    plain_forward,
)
from .numcore import ContractError, Graph, NumericError, Rng, filter_normalize_var, grad
from .trainers import SgdState, TaskGradient, average_fuse, disentangle_epoch, joint_sgd_step

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def fusion_weights(nus) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-filter weights normalized across tasks so they sum to one.

    Filters where every task's weight is zero fall back to equal weights; the
    boolean mask of those filters is returned alongside.
    """
    nus = [np.asarray(v, dtype=np.float64) for v in nus]
    if not nus:
        raise ContractError("no importance variables to fuse with")
    total = np.sum(nus, axis=0)
    dead = total <= 0
    if dead.any():
        total = np.where(dead, 1.0, total)
        return [np.where(dead, 1.0 / len(nus), v / total) for v in nus], dead
    return [v / total for v in nus], dead


def fuse_gradients(nus, grads) -> tuple[np.ndarray, int]:
    """sum_k nu'_k g_k / sum_k nu'_k at every filter (broadcast over filter dims).

    Returns the fused gradient and the number of filters that fell back to
    the unweighted mean.
    """
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(grads) != len(nus):
        raise ContractError("one importance tensor per task gradient")
    if any(g.shape != grads[0].shape for g in grads):
        raise ContractError("task gradients must share one shape")
    weights, dead = fusion_weights(nus)
    extra = grads[0].ndim - weights[0].ndim
    if weights[0].shape != grads[0].shape[:weights[0].ndim]:
        raise ContractError(f"importance shape {weights[0].shape} does not match gradient {grads[0].shape}")
    fused = sum(w.reshape(w.shape + (1,) * extra) * g for w, g in zip(weights, grads))
    nfall = int(dead.sum())
    if nfall:
        log.info("fusion fell back to the plain mean on %d filter(s)", nfall)
    return fused, nfall


def _bias_weights(nus) -> list[np.ndarray]:
    # output neuron i of a layer is weighted by each task's row sum of nu
    rows, _ = fusion_weights([np.asarray(v).sum(axis=1) for v in nus])
    return rows


def fused_update(model: MultiOutputModel, importances: ImportanceSet | None, tgs: list[TaskGradient],
                 average: bool = False) -> tuple[list[np.ndarray], list[np.ndarray | None], int]:
    """Fused shared-weight and bias gradients for every shared layer."""
    gw, gb, nfall = [], [], 0
    for l, layer in enumerate(model.shared):
        users = [k for k in model.users(l)]
        gs = [tgs[k].shared[l] for k in users]
        bs = [tgs[k].bias[l] for k in users] if layer.b is not None else None
        if average or len(users) == 1:
            gw.append(average_fuse(gs))
            gb.append(None if bs is None else average_fuse(bs))
            continue
        nus = [importances.nu[k][l] for k in users]
        fused, n = fuse_gradients(nus, gs)
        nfall += n
        gw.append(fused)
        gb.append(None if bs is None else sum(w * b for w, b in zip(_bias_weights(nus), bs)))
    return gw, gb, nfall


def _apply(model: MultiOutputModel, gw, gb) -> MultiOutputModel:
    out = model.copy()
    for l, L in enumerate(out.shared):
        L.w -= gw[l]
        if L.b is not None:
            L.b -= gb[l]
    return out


def apply_head_deltas(model: MultiOutputModel, tgs: list[TaskGradient]) -> None:
    for k, tg in enumerate(tgs):
        for L, (dw, db) in zip(model.heads[k], tg.head_delta):
            L.w += dw
            if L.b is not None:
                L.b += db


# ---------------------------------------------------------------------------
# meta step
# ---------------------------------------------------------------------------

def _meta_loss(g: Graph, model: MultiOutputModel, nus: dict, tgs: list[TaskGradient], batch,
               routed: ImportanceSet | None = None):
    """Joint loss F at the hypothetical weights w0 - g(nu).

    With ``routed`` every task runs through its own effective weights built
    from the fused shared weights (nu taken from ``nus`` where present).
    """
    shared = []
    for l, layer in enumerate(model.shared):
        users = model.users(l)
        if (users[0], l) not in nus:
            gw = average_fuse([tgs[k].shared[l] for k in users])
            w = g.const(layer.w - gw)
            b = None if layer.b is None else g.const(layer.b - average_fuse([tgs[k].bias[l] for k in users]))
            shared.append((w, b))
            continue
        vs = [nus[(k, l)] for k in users]
        total = vs[0]
        for v in vs[1:]:
            total = g.add(total, v)
        dead = (total.value <= 0).astype(np.float64)
        denom = g.add(total, dead)
        fused = None
        for k, v in zip(users, vs):
            wk = g.div(g.add(v, dead / len(users)), denom)
            gk = tgs[k].shared[l]
            term = g.mul(g.reshape(wk, wk.shape + (1,) * (gk.ndim - 2)), gk)
            fused = term if fused is None else g.add(fused, term)
        w = g.sub(layer.w, fused)
        b = None
        if layer.b is not None:
            rows = [g.sum(v, axis=1) for v in vs]
            rt = rows[0]
            for r in rows[1:]:
                rt = g.add(rt, r)
            rdead = (rt.value <= 0).astype(np.float64)
            rden = g.add(rt, rdead)
            fb = None
            for k, r in zip(users, rows):
                term = g.mul(g.div(g.add(r, rdead / len(users)), rden), tgs[k].bias[l])
                fb = term if fb is None else g.add(fb, term)
            b = g.sub(layer.b, fb)
        shared.append((w, b))
    bound = bind(g, model, trainable_heads=(), trainable_shared=False)
    X, Y = batch
    if routed is None:
        outs = model.outputs(g, X, range(model.K), shared, bound.heads)
    else:
        def task_shared(k):
            eff = []
            for l, (w, b) in enumerate(shared):
                if l not in model.task_layers(k):
                    eff.append((w, b))
                    continue
                nu = nus.get((k, l))
                if nu is None:
                    nu = g.const(routed.nu[k][l])
                nh = lateral_normalize_var(g, nu, routed.eps)
                scale = g.reshape(nh, nh.shape + (1,) * (len(w.shape) - 2))
                eff.append((g.mul(scale, filter_normalize_var(g, w)), b))
            return eff
        outs = model.outputs(g, X, range(model.K), task_shared, bound.heads)
    F = None
    for k in range(model.K):
        f = model.task_loss(g, outs[k], None if Y is None else Y[:, k])
        F = f if F is None else g.add(F, f)
    return F


def meta_loss_value(model, importances: ImportanceSet, tgs, batch, routed: bool = False) -> float:
    g = Graph()
    nus = {(k, l): g.const(importances.nu[k][l]) for l in range(len(model.shared))
           for k in model.users(l) if len(model.users(l)) > 1}
    return _meta_loss(g, model, nus, tgs, batch, importances if routed else None).value.item()


@dataclass
class MetaInfo:
    steps: int = 0
    loss_before: float = float("nan")
    loss_after: float = float("nan")
    halvings: int = 0


def meta_step(importances: ImportanceSet, tgs: list[TaskGradient], model: MultiOutputModel, batch,
              lr: float, n_meta: int = 1, max_halvings: int = 5,
              routed: bool = False) -> tuple[ImportanceSet, MetaInfo]:
    """``n_meta`` gradient steps on nu minimizing F(X, w0 - g(nu)).

    ``routed`` evaluates F with every task on its own route (the inference
    mode of the importance-augmented variants); otherwise the plain forward.

    Each step backtracks (halving the rate up to ``max_halvings`` times) until
    F does not increase; if no rate works the step is skipped. nu is clamped
    at zero after each step. A non-finite meta loss restores the input nu.
    """
    info = MetaInfo()
    if n_meta <= 0:
        return importances, info
    keys = [(k, l) for l in range(len(model.shared)) for k in model.users(l) if len(model.users(l)) > 1]
    nu = importances.copy()
    for _ in range(n_meta):
        g = Graph()
        vars_ = {key: g.param(f"nu.{key[0]}.{key[1]}", nu.nu[key[0]][key[1]]) for key in keys}
        F = _meta_loss(g, model, vars_, tgs, batch, nu if routed else None)
        f0 = F.value.item()
        if not np.isfinite(f0):
            raise NumericError("non-finite meta loss; importance variables restored")
        if np.isnan(info.loss_before):
            info.loss_before = f0
        info.loss_after = f0
        if not keys:
            break
        grads = grad(g, F)
        step = lr
        for h in range(max_halvings + 1):
            cand = nu.copy()
            for (k, l) in keys:
                v = cand.nu[k][l]
                v -= step * grads[f"nu.{k}.{l}"]
                np.maximum(v, 0.0, out=v)
            f1 = meta_loss_value(model, cand, tgs, batch, routed)
            if np.isfinite(f1) and f1 <= f0:
                nu = cand
                info.loss_after = f1
                info.steps += 1
                info.halvings += h
                break
            step *= 0.5
    return nu, info


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model: MultiOutputModel, importances: ImportanceSet | None, X, Y, routed: bool) -> dict:
    """Per-task loss and top-1 accuracy; ``routed`` uses the task's effective weights."""
    losses, accs = [], []
    for k in range(model.K):
        if routed:
            out = forward_task(model, importances, k, X)
        else:
            out = plain_forward(model, k, X)
        g = Graph()
        y = None if Y is None else Y[:, k]
        losses.append(model.task_loss(g, g.const(out), y).value.item())
        accs.append(None if Y is None else float(np.mean(out.argmax(axis=1) == y)))
    return {"loss": losses, "acc": accs}


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

@dataclass
class EpochReport:
    epoch: int
    lr: float
    task_grad_norms: list[float]
    fused_norm: float
    joint_loss: float
    train_loss: list[float]
    train_acc: list
    test_acc: list
    meta_steps: int = 0
    meta_loss_before: float | None = None
    meta_loss_after: float | None = None
    fallbacks: int = 0
    extra: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    model: MultiOutputModel
    importances: ImportanceSet | None
    reports: list[EpochReport]
    method: str
    task_gradients: list[list[TaskGradient]] = field(default_factory=list)

    @property
    def routed(self) -> bool:
        return self.method in ("dr-mgf", "dr-avgf")


VARIANT_ROUTES = {"dr-mgf": "nu", "dr-avgf": "nu", "meta-gf-only": "plain"}


def run_method(cfg: RunConfig, data, model: MultiOutputModel, importances: ImportanceSet | None = None,
               on_epoch: Callable | None = None, route: str | None = None,
               keep_task_gradients: bool = False) -> RunResult:
    """Train ``model`` (a copy) with ``cfg.method`` for ``cfg.max_iter`` epochs."""
    method = cfg.method
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}")
    model = model.copy()
    rng = Rng(cfg.seed)
    if method in VARIANT_ROUTES and importances is None:
        importances = init_importances(model, rng.spawn(0x1117), cfg.nu_init, cfg.eps)
    importances = importances.copy() if importances is not None else None
    result = RunResult(model, importances, [], method)
    state = SgdState(cfg.lr, cfg.momentum, cfg.weight_decay)
    task_states = [{} for _ in range(model.K)]
    for epoch in range(cfg.max_iter):
        t0 = time.perf_counter()
        lr = lr_at(cfg.lr, epoch, cfg.max_iter, cfg.milestones, cfg.lr_factor)
        lr_nu = lr_at(cfg.lr_nu, epoch, cfg.max_iter, cfg.milestones, cfg.lr_factor)
        batches = data.batches(epoch, cfg.seed, cfg.batch_size)
        norms, fused_norm, info, nfall = [], 0.0, MetaInfo(), 0
        if method in ("sgd-joint", "pcgrad"):
            state.lr = lr
            prng = rng.spawn(0x9C, epoch)
            for batch in batches:
                joint_sgd_step(result.model, batch, state, "sum" if method == "sgd-joint" else "pcgrad", prng)
        else:
            w0 = result.model
            r = route or VARIANT_ROUTES[method]
            tgs = []
            for k in range(w0.K):
                nu_row, tg = disentangle_epoch(w0, importances, k, batches, cfg, epoch, r,
                                                 state=task_states[k] if cfg.carry_momentum else None)
                if r == "nu":
                    importances.nu[k] = nu_row
                tgs.append(tg)
            norms = [tg.norm() for tg in tgs]
            head_model = w0.copy()
            apply_head_deltas(head_model, tgs)
            average = method == "dr-avgf"
            if not average and importances is not None:
                mb = data.meta_batch(epoch, cfg.seed, cfg.batch_size)
                importances, info = meta_step(importances, tgs, head_model, mb, cfg.meta_lr or lr_nu,
                                              cfg.n_meta, cfg.meta_halvings, routed=result.routed)
            gw, gb, nfall = fused_update(head_model, importances, tgs, average)
            fused_norm = float(np.sqrt(sum(np.sum(x * x) for x in gw)))
            result.model = _apply(head_model, gw, gb)
            result.importances = importances
            if keep_task_gradients:
                result.task_gradients.append(tgs)
        ev = evaluate(result.model, importances, data.X_train, data.Y_train, result.routed)
        te = evaluate(result.model, importances, data.X_test, data.Y_test, result.routed) \
            if data.X_test is not None and len(data.X_test) else {"acc": []}
        if not np.all(np.isfinite(ev["loss"])):
            raise NumericError(f"non-finite training loss after epoch {epoch}")
        rep = EpochReport(epoch, lr, norms, fused_norm, float(np.sum(ev["loss"])), ev["loss"], ev["acc"],
                          te["acc"], info.steps,
                          None if np.isnan(info.loss_before) else info.loss_before,
                          None if np.isnan(info.loss_after) else info.loss_after, nfall)
        rep.wall_time = time.perf_counter() - t0
        if on_epoch is not None:
            on_epoch(result, rep)
        result.reports.append(rep)
        log.debug("epoch %d %s loss=%.4f acc=%s", epoch, method, rep.joint_loss, rep.train_acc)
    return result


def run_drmgf(cfg: RunConfig, data, model: MultiOutputModel, importances: ImportanceSet | None = None,
              **kw) -> RunResult:
    """Disentanglement-and-fusion training with meta-weighted fusion."""
    if cfg.method != "dr-mgf":
        cfg = RunConfig.from_dict({**cfg.to_dict(), "method": "dr-mgf"})
    return run_method(cfg, data, model, importances, **kw)


def ablation_variant(cfg: RunConfig) -> Callable[..., RunResult]:
    """Driver for one of dr-mgf, meta-gf-only, dr-avgf, sgd-joint, pcgrad."""
    if cfg.method not in METHODS:
        raise ContractError(f"unknown variant {cfg.method!r}")
    return partial(run_method, cfg)
