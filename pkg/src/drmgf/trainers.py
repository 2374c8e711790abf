"""Per-task disentanglement epochs and the joint-training baselines."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, lr_at
from .model import ImportanceSet, MultiOutputModel, augment, bind, effective_weights
from .numcore import ContractError, Graph, NumericError, Rng, grad


@dataclass
class SgdState:
    """SGD with momentum and coupled (L2) weight decay, PyTorch convention."""

    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], names=None) -> None:
        for name in params if names is None else names:
            p, g = params[name], grads[name]
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            d = g + self.weight_decay * p if self.weight_decay else g
            if self.momentum:
                v = self.velocity.get(name)
                if v is None:
                    v = self.velocity[name] = d.copy()
                else:
                    v *= self.momentum
                    v += d
                d = v
            p -= self.lr * d


@dataclass
class AuxWeights:
    alpha: float = 1.0
    beta: tuple[float, ...] = ()

    def __post_init__(self):
        if self.alpha != 1.0:
            raise ContractError("alpha is fixed at 1")
        if any(not 0.0 <= b <= 0.5 for b in self.beta):
            raise ContractError("every beta must lie in [0, 0.5]")

    @classmethod
    def uniform(cls, K: int, k: int, beta: float, alpha: float = 1.0) -> "AuxWeights":
        return cls(alpha, tuple(0.0 if i == k else beta for i in range(K)))

    def weight(self, i: int, k: int) -> float:
        return self.alpha if i == k else self.beta[i]


@dataclass
class TaskGradient:
    """Expected update of task k over one disentanglement epoch.

    ``shared[l] = w0 - effective_end`` so that ``w0 - shared[l]`` is the
    task's end point (descent convention, like a gradient).
    """

    task: int
    shared: dict[int, np.ndarray]
    bias: dict[int, np.ndarray]
    nu: dict[int, np.ndarray]
    w_end: dict[int, np.ndarray]
    head_delta: list[tuple[np.ndarray, np.ndarray | None]]
    steps: int = 0
    mean_loss: float = float("nan")

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.shared.values())))


def _param_store(model: MultiOutputModel, nu_row: list | None) -> dict[str, np.ndarray]:
    store = dict(model.tensors())
    if nu_row is not None:
        for l, v in enumerate(nu_row):
            if v is not None:
                store[f"nu.{l}"] = v
    return store


def disentangle_epoch(w0: MultiOutputModel, importances: ImportanceSet | None, k: int, batches,
                      cfg: RunConfig, epoch: int = 0, route: str = "nu",
                      aux: AuxWeights | None = None,
                      state: dict | None = None) -> tuple[list, TaskGradient]:
    """Train a private copy of the model for task k over one epoch.

    route ``nu``: importance-augmented forward, nu_k trained jointly with w.
    route ``plain``: raw weights (used by the meta-fusion-only ablation).
    route ``identity``: importance pinned to the live filter norms (exact
    reconstruction of the raw weights; a reference path for tests).
    Returns the learned importance row nu_k* and the task's expected gradient.

    ``state`` (a dict, filled on first use) carries the task's momentum
    buffers from one epoch to the next; without it momentum restarts at zero.
    """
    if not 0 <= k < w0.K:
        raise ContractError(f"task index {k} out of range")
    if route not in ("nu", "plain", "identity"):
        raise ContractError(f"unknown route {route!r}")
    if route == "nu" and importances is None:
        raise ContractError("route 'nu' needs importance variables")
    model = w0.copy()
    nu_row = None
    if route == "nu":
        nu_row = [None if v is None else v.copy() for v in importances.nu[k]]
    aux = aux or AuxWeights.uniform(w0.K, k, cfg.beta, cfg.alpha)
    tasks = [i for i in range(w0.K) if aux.weight(i, k) > 0]
    store = _param_store(model, nu_row)
    nu_names = [n for n in store if n.startswith("nu.")]
    w_names = [n for n in store if not n.startswith("nu.")]
    state = {} if state is None else state
    opt_w = state.setdefault("w", SgdState(0.0, cfg.momentum, cfg.weight_decay))
    opt_nu = state.setdefault("nu", SgdState(0.0, cfg.momentum_nu, cfg.weight_decay_nu))
    opt_w.lr = lr_at(cfg.lr, epoch, cfg.max_iter, cfg.milestones, cfg.lr_factor)
    opt_nu.lr = lr_at(cfg.lr_nu, epoch, cfg.max_iter, cfg.milestones, cfg.lr_factor)
    eps = importances.eps if importances is not None else cfg.eps
    steps, total = 0, 0.0
    for bi, (X, Y) in enumerate(batches):
        g = Graph()
        bound = bind(g, model)
        if route == "plain":
            shared = bound.shared
        elif route == "identity":
            shared = augment(bound, model, "identity", k)
        else:
            shared = _augment_row(bound, model, nu_row, eps, k)
        outs = model.outputs(g, X, tasks, shared, bound.heads)
        loss = None
        for i in tasks:
            term = g.mul(model.task_loss(g, outs[i], None if Y is None else Y[:, i]), aux.weight(i, k))
            loss = term if loss is None else g.add(loss, term)
        if route == "nu" and cfg.lam:
            for v in bound.nu.values():
                loss = g.add(loss, g.mul(g.sum(g.square(v)), cfg.lam))
        value = loss.value.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite disentanglement loss for task {k} at batch {bi}")
        try:
            grads = grad(g, loss)
        except NumericError as exc:
            raise NumericError(f"task {k} at batch {bi}: {exc}") from exc
        opt_w.step(store, grads, w_names)
        if nu_names:
            opt_nu.step(store, grads, nu_names)
            for n in nu_names:
                np.maximum(store[n], 0.0, out=store[n])
        steps += 1
        total += value

    tg = TaskGradient(k, {}, {}, {}, {}, [], steps, total / steps if steps else float("nan"))
    for l in w0.task_layers(k):
        w_end = model.shared[l].w
        if route == "nu":
            end = effective_weights(w_end, nu_row[l], eps)
            tg.nu[l] = nu_row[l]
        else:
            end = w_end
        tg.w_end[l] = w_end.copy()
        tg.shared[l] = w0.shared[l].w - end
        if w0.shared[l].b is not None:
            tg.bias[l] = w0.shared[l].b - model.shared[l].b
    for L0, L1 in zip(w0.heads[k], model.heads[k]):
        tg.head_delta.append((L1.w - L0.w, None if L0.b is None else L1.b - L0.b))
    return nu_row if nu_row is not None else [], tg


def _augment_row(bound, model, nu_row, eps: float, k: int):
    rows: list[list] = [[None] * len(model.shared) for _ in range(model.K)]
    rows[k] = nu_row
    return augment(bound, model, ImportanceSet(rows, eps), k, train_nu=True)


# ---------------------------------------------------------------------------
# joint baselines
# ---------------------------------------------------------------------------

def task_losses(model: MultiOutputModel, batch, g: Graph | None = None):
    """Per-task losses of the plain forward pass on one all-task batch."""
    g = g or Graph()
    X, Y = batch
    bound = bind(g, model)
    outs = model.outputs(g, X, range(model.K), bound.shared, bound.heads)
    losses = [model.task_loss(g, outs[k], None if Y is None else Y[:, k]) for k in range(model.K)]
    return g, bound, losses


def joint_sgd_step(model: MultiOutputModel, batch, state: SgdState, combine: str = "sum",
                   rng: Rng | None = None) -> MultiOutputModel:
    """One SGD step on the summed task losses (or PCGrad-surgered gradients)."""
    g, _, losses = task_losses(model, batch)
    values = [l.value.item() for l in losses]
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite task loss {values}")
    store = model.tensors()
    if combine == "sum":
        total = losses[0]
        for l in losses[1:]:
            total = g.add(total, l)
        grads = grad(g, total)
    elif combine == "pcgrad":
        per_task = [grad(g, l) for l in losses]
        shared_names = [n for n in store if n.startswith("shared.")]
        flat = [np.concatenate([gt[n].ravel() for n in shared_names]) for gt in per_task]
        fused = pcgrad_fuse(flat, rng) * len(flat)   # mean -> sum, to match the summed-loss scale
        grads = {}
        off = 0
        for n in shared_names:
            size = store[n].size
            grads[n] = fused[off:off + size].reshape(store[n].shape)
            off += size
        for n in store:
            if n.startswith("head."):
                grads[n] = sum(gt[n] for gt in per_task)
    else:
        raise ContractError(f"unknown combine mode {combine!r}")
    state.step(store, grads)
    return model


def single_task_sgd_step(model: MultiOutputModel, k: int, batch, state: SgdState) -> float:
    """One plain SGD step on task k alone; only the parameters on its path move."""
    X, Y = batch
    g = Graph()
    bound = bind(g, model, trainable_heads=(k,), trainable_shared=True)
    out = model.outputs(g, X, [k], bound.shared, bound.heads)[k]
    loss = model.task_loss(g, out, None if Y is None else Y[:, k])
    value = loss.value.item()
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss for task {k}")
    grads = grad(g, loss)
    on_path = [n for n in grads if n.startswith(f"head.{k}.")
               or (n.startswith("shared.") and int(n.split(".")[1]) < model.attach[k])]
    state.step(model.tensors(), grads, on_path)
    return value


def pcgrad_fuse(grads, rng: Rng | None = None) -> np.ndarray:
    """Project each gradient off the others it conflicts with, then average."""
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(grads) < 2:
        raise ContractError("PCGrad needs at least two gradients")
    if any(g.shape != grads[0].shape for g in grads):
        raise ContractError("PCGrad gradients must share one shape")
    surgered = []
    for i, gi in enumerate(grads):
        pc = gi.copy()
        others = [j for j in range(len(grads)) if j != i]
        if rng is not None:
            others = [others[t] for t in rng.permutation(len(others))]
        for j in others:
            gj = grads[j]
            dot = float(np.vdot(pc, gj))
            if dot < 0:
                pc -= dot / float(np.vdot(gj, gj)) * gj
        surgered.append(pc)
    return np.mean(surgered, axis=0)


def average_fuse(gradients) -> np.ndarray:
    """Elementwise mean of the given gradients (arrays or per-layer TaskGradients)."""
    gradients = list(gradients)
    if not gradients:
        raise ContractError("cannot average an empty gradient list")
    return np.mean([np.asarray(g, dtype=np.float64) for g in gradients], axis=0)
