"""Measurements: gradient conflict and convergence gain, filter importance
profiles, task-specific pruning, structure similarity and the relative
multi-task drop.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metagf import evaluate, fusion_weights
from .model import ImportanceSet, MultiOutputModel, bake, bind
from .numcore import ContractError, Graph, NormFloorWarning, NumericError, grad
from .trainers import SgdState, joint_sgd_step

log = logging.getLogger(__name__)

PROVENANCES = ("accumulated-gradient", "learned")


# ---------------------------------------------------------------------------
# conflict and gain
# ---------------------------------------------------------------------------

def filter_rows(g) -> np.ndarray:
    """View a gradient as one row per filter.

    A 1-D vector is a single filter, a 2-D array has one filter per row, a
    weight tensor ``(m, n, s, s)`` has ``m * n`` filters of ``s * s`` entries.
    A list of such arrays concatenates their filters (all must share a width).
    """
    if isinstance(g, (list, tuple)) and any(np.ndim(x) > 0 for x in g):
        rows = [filter_rows(x) for x in g]
        if len({r.shape[1] for r in rows}) > 1:
            raise ContractError("filters of different sizes cannot be stacked")
        return np.concatenate(rows, axis=0)
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 1:
        return g[None, :]
    if g.ndim == 2:
        return g
    if g.ndim == 4:
        return g.reshape(g.shape[0] * g.shape[1], -1)
    raise ContractError(f"cannot split a {g.ndim}-D gradient into filters")


def conflict_value(g1, g2) -> float:
    """sum_i max(0, -<g1_i, g2_i>) / ||g1||^2 over filters i."""
    a, b = filter_rows(g1), filter_rows(g2)
    if a.shape != b.shape:
        raise ContractError(f"gradient shapes differ: {a.shape} vs {b.shape}")
    n1 = float(np.sum(a * a))
    if not n1 > 0:
        raise ContractError("conflict value undefined for a zero first gradient")
    dots = np.einsum("ij,ij->i", a, b)
    return float(np.sum(np.maximum(0.0, -dots)) / n1)


def convergence_gain(f1, w, g1, g2, eta: float) -> float | None:
    """Relative change of task 1's measured loss drop when g2 joins its update.

    ``f1`` maps a weight array (same shape as ``w``) to a scalar loss. Returns
    None when the single-task drop is exactly zero (sample to be dropped).
    """
    w = np.asarray(w, dtype=np.float64)
    g1 = np.asarray(g1, dtype=np.float64)
    g2 = np.asarray(g2, dtype=np.float64)
    if not (w.shape == g1.shape == g2.shape):
        raise ContractError("w, g1 and g2 must share one shape")
    f0 = float(f1(w))
    d1 = f0 - float(f1(w - eta * g1))
    d12 = f0 - float(f1(w - eta * (g1 + g2)))
    if not (math.isfinite(d1) and math.isfinite(d12)):
        raise NumericError("non-finite loss during a trial update")
    if d1 == 0.0:
        return None
    return (d12 - d1) / d1


@dataclass(frozen=True)
class ConflictSample:
    t: int
    C: float
    G: float
    pair: tuple[int, int]

    def __post_init__(self):
        if not self.C >= 0:
            raise ContractError("conflict value must be nonnegative")


def zscore(series, name: str = "series") -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if x.size < 2:
        raise ContractError(f"{name}: need at least two samples")
    sd = x.std()
    if not sd > 0:
        raise ContractError(f"{name}: zero standard deviation")
    return (x - x.mean()) / sd


def pearson(a, b) -> float:
    a = zscore(a, "a")
    b = zscore(b, "b")
    if a.shape != b.shape:
        raise ContractError("pearson needs two series of equal length")
    return float(np.clip(np.mean(a * b), -1.0, 1.0))


def default_pairs(model: MultiOutputModel) -> list[tuple[int, int]]:
    """Every task paired with the deepest one (ties: the last task)."""
    deep = max(range(model.K), key=lambda k: (model.attach[k], k))
    return [(a, deep) for a in range(model.K) if a != deep and _common_layers(model, a, deep)]


def _common_layers(model: MultiOutputModel, a: int, b: int) -> list[int]:
    return [l for l in model.task_layers(a) if l in model.task_layers(b)]


def task_shared_grads(model: MultiOutputModel, batch, tasks=None) -> dict[int, list[np.ndarray]]:
    """Per-task gradient of the plain loss with respect to every shared layer's w."""
    X, Y = batch
    tasks = range(model.K) if tasks is None else tasks
    out = {}
    for k in tasks:
        g = Graph()
        bound = bind(g, model, trainable_heads=(), trainable_shared=True)
        o = model.outputs(g, X, [k], bound.shared, bound.heads)[k]
        loss = model.task_loss(g, o, None if Y is None else Y[:, k])
        gr = grad(g, loss)
        out[k] = [gr.get(f"shared.{l}.w", np.zeros_like(L.w)) for l, L in enumerate(model.shared)]
    return out


def _task_loss(model: MultiOutputModel, k: int, batch) -> float:
    X, Y = batch
    g = Graph()
    bound = bind(g, model, trainable_heads=(), trainable_shared=False)
    o = model.outputs(g, X, [k], bound.shared, bound.heads)[k]
    return model.task_loss(g, o, None if Y is None else Y[:, k]).value.item()


def sample_conflict_gain(model: MultiOutputModel, batch, eta: float, pairs=None, t: int = 0,
                         grads=None) -> tuple[list[ConflictSample], int]:
    """Conflict and measured gain for every pair at the current weights.

    Both are taken on the shared layers the pair has in common. Returns the
    samples and the number dropped for a zero denominator.
    """
    pairs = default_pairs(model) if pairs is None else pairs
    grads = grads or task_shared_grads(model, batch)
    samples, dropped = [], 0
    for a, b in pairs:
        layers = _common_layers(model, a, b)
        ga = [grads[a][l] for l in layers]
        gb = [grads[b][l] for l in layers]
        if not sum(float(np.sum(x * x)) for x in ga) > 0:
            dropped += 1
            continue
        C = conflict_value(ga, gb)
        sizes = [model.shared[l].w.size for l in layers]
        flat = lambda xs: np.concatenate([x.ravel() for x in xs])  # noqa: E731
        w0 = flat([model.shared[l].w for l in layers])

        def f1(wflat, a=a, layers=layers, sizes=sizes):
            trial = model.copy()
            off = 0
            for l, n in zip(layers, sizes):
                trial.shared[l].w = wflat[off:off + n].reshape(model.shared[l].w.shape)
                off += n
            return _task_loss(trial, a, batch)

        G = convergence_gain(f1, w0, flat(ga), flat(gb), eta)
        if G is None:
            dropped += 1
            continue
        samples.append(ConflictSample(t, C, G, (a, b)))
    return samples, dropped


@dataclass
class ConflictStudy:
    samples: list[ConflictSample] = field(default_factory=list)
    dropped: int = 0

    def pearson(self) -> float:
        C = [s.C for s in self.samples]
        G = [s.G for s in self.samples]
        return pearson(C, G)

    def rows(self) -> list[dict]:
        Cz = zscore([s.C for s in self.samples], "C")
        Gz = zscore([s.G for s in self.samples], "G")
        return [{"t": s.t, "task_a": s.pair[0], "task_b": s.pair[1], "C": s.C, "G": s.G,
                 "C_z": float(c), "G_z": float(gz)} for s, c, gz in zip(self.samples, Cz, Gz)]


def conflict_gain_study(model: MultiOutputModel, data, epochs: int, lr: float, momentum: float = 0.9,
                        weight_decay: float = 1e-4, batch_size: int = 64, seed: int = 0,
                        pairs=None, eta: float | None = None) -> ConflictStudy:
    """Joint SGD on the summed losses, sampling (C, G) before every step.

    ``eta`` is the trial step of the gain measurement (default: ``lr``).
    """
    model = model.copy()
    state = SgdState(lr, momentum, weight_decay)
    study = ConflictStudy()
    t = 0
    for epoch in range(epochs):
        for batch in data.batches(epoch, seed, batch_size):
            s, d = sample_conflict_gain(model, batch, eta or lr, pairs, t)
            study.samples.extend(s)
            study.dropped += d
            joint_sgd_step(model, batch, state)
            t += 1
    if study.dropped:
        log.info("conflict study dropped %d sample(s) with a zero loss drop", study.dropped)
    return study


def fusion_shares(model: MultiOutputModel, importances: ImportanceSet, l: int) -> dict[int, np.ndarray]:
    """Per-filter fusion weight of every user of layer l, times the user count
    (so equal shares give 1 everywhere)."""
    users = model.users(l)
    w, _ = fusion_weights([importances.nu[k][l] for k in users])
    return {k: len(users) * wk for k, wk in zip(users, w)}


def conflict_probe(model: MultiOutputModel, batch, importances: ImportanceSet | None = None,
                   routed: bool = False, weighted: bool = False, pairs=None) -> float:
    """Mean conflict over the task pairs on their common shared filters.

    ``routed``: each task's gradient is taken at its own effective weights.
    ``weighted``: each task's per-filter gradient is scaled by its fusion
    share, i.e. the conflict between the tasks' contributions to the fused
    update. Plain joint training corresponds to neither.
    """
    pairs = default_pairs(model) if pairs is None else pairs
    if (routed or weighted) and importances is None:
        raise ContractError("routed or weighted probes need importance variables")
    grads = {}
    for k in {k for p in pairs for k in p}:
        m = bake(model, importances, k) if routed else model
        grads[k] = task_shared_grads(m, batch, [k])[k]
        if weighted:
            for l in model.task_layers(k):
                share = fusion_shares(model, importances, l)[k]
                grads[k][l] = grads[k][l] * share.reshape(share.shape + (1,) * (grads[k][l].ndim - 2))
    values = []
    for a, b in pairs:
        layers = _common_layers(model, a, b)
        ga = [grads[a][l] for l in layers]
        if sum(float(np.sum(x * x)) for x in ga) > 0:
            values.append(conflict_value(ga, [grads[b][l] for l in layers]))
    return float(np.mean(values)) if values else 0.0


# ---------------------------------------------------------------------------
# importance profiles
# ---------------------------------------------------------------------------

@dataclass
class ImportanceProfile:
    """values[k][l]: importance of every filter of shared layer l to task k."""

    values: list[dict[int, np.ndarray]]
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")

    @property
    def K(self) -> int:
        return len(self.values)

    def flat(self, k: int, layers=None) -> np.ndarray:
        layers = sorted(self.values[k]) if layers is None else layers
        return np.concatenate([self.values[k][l].ravel() for l in layers])


def filter_grad_norms(grads: list[np.ndarray]) -> list[np.ndarray]:
    """Per-filter Euclidean norms of per-layer weight gradients, shape (m, n)."""
    return [np.sqrt(np.sum(np.asarray(g).reshape(g.shape[0], g.shape[1], -1) ** 2, axis=2)) for g in grads]


def accumulate_importance(norms_per_step) -> list[np.ndarray]:
    """Squared accumulated per-filter gradient norms, normalized to sum to one.

    ``norms_per_step`` is a sequence over steps of per-layer norm arrays (a
    bare array per step is one layer). Filters of all layers share the
    normalization. An all-zero accumulation yields the uniform profile.
    """
    steps = list(norms_per_step)
    if not steps:
        raise ContractError("need at least one recorded step")
    steps = [[np.asarray(s, dtype=np.float64)] if not isinstance(s, (list, tuple)) else
             [np.asarray(x, dtype=np.float64) for x in s] for s in steps]
    acc = [np.zeros_like(x) for x in steps[0]]
    for s in steps:
        if len(s) != len(acc) or any(a.shape != x.shape for a, x in zip(acc, s)):
            raise ContractError("every step must record the same filters")
        for a, x in zip(acc, s):
            if np.any(x < 0):
                raise ContractError("gradient norms must be nonnegative")
            a += x
    sq = [a * a for a in acc]
    total = sum(float(x.sum()) for x in sq)
    if not total > 0:
        warnings.warn("all accumulated gradient norms are zero; using a uniform profile", RuntimeWarning,
                      stacklevel=2)
        n = sum(x.size for x in sq)
        return [np.full_like(x, 1.0 / n) for x in sq]
    return [x / total for x in sq]


def gradient_importance(model: MultiOutputModel, batches) -> ImportanceProfile:
    """Importance profile from per-filter gradient norms over the given batches
    at fixed weights (pair with training to accumulate along a trajectory)."""
    rec = {k: [] for k in range(model.K)}
    for batch in batches:
        grads = task_shared_grads(model, batch)
        for k in range(model.K):
            layers = list(model.task_layers(k))
            rec[k].append(filter_grad_norms([grads[k][l] for l in layers]))
    return profile_from_norms(model, rec)


def profile_from_norms(model: MultiOutputModel, rec: dict[int, list]) -> ImportanceProfile:
    values = []
    for k in range(model.K):
        layers = list(model.task_layers(k))
        acc = accumulate_importance(rec[k])
        values.append(dict(zip(layers, acc)))
    return ImportanceProfile(values, "accumulated-gradient")


def learned_profile(model: MultiOutputModel, importances: ImportanceSet) -> ImportanceProfile:
    """Learned importance variables on [0, 1] by one global scale, so values
    stay comparable across tasks exactly as the fusion weights compare them."""
    values = [{l: np.asarray(importances.nu[k][l], dtype=np.float64) for l in model.task_layers(k)}
              for k in range(model.K)]
    top = max((float(v.max()) for row in values for v in row.values()), default=0.0)
    if top > 0:
        values = [{l: v / top for l, v in row.items()} for row in values]
    return ImportanceProfile(values, "learned")


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------

def dominant_filters(model: MultiOutputModel, profile: ImportanceProfile, p: int) -> dict[int, np.ndarray]:
    """Boolean masks of the filters where task p's importance beats every
    other user of the layer strictly."""
    if profile.K != model.K:
        raise ContractError("profile and model disagree on the task count")
    masks = {}
    for l in model.task_layers(p):
        others = [k for k in model.users(l) if k != p]
        for k in [p] + others:
            if l not in profile.values[k]:
                raise ContractError(f"profile misses layer {l} for task {k}")
        mine = profile.values[p][l]
        mask = np.ones(mine.shape, dtype=bool)
        for k in others:
            mask &= mine > profile.values[k][l]
        masks[l] = mask
    return masks


def accuracies(model: MultiOutputModel, X, Y, importances: ImportanceSet | None = None,
               routed: bool = False) -> np.ndarray:
    return np.array(evaluate(model, importances, X, Y, routed)["acc"], dtype=np.float64)


@dataclass
class DegradationMatrix:
    """entry (p, q): relative accuracy drop of task q after pruning task p's filters."""

    values: np.ndarray
    pruned: list[int]
    base_acc: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ContractError("degradation matrix must be finite")

    def diagonal_max_rows(self, tol: float = 0.0) -> list[int]:
        """Rows whose maximum is attained on the diagonal."""
        return [p for p in range(len(self.values)) if self.values[p, p] >= self.values[p].max() - tol]


def prune_and_measure(model: MultiOutputModel, profile: ImportanceProfile, X, Y,
                      importances: ImportanceSet | None = None, routed: bool = False,
                      tasks=None) -> DegradationMatrix:
    """Zero each task's dominant shared filters in turn and record every
    task's relative accuracy drop. ``model`` is not modified."""
    X = np.asarray(X)
    if X.shape[0] == 0 or Y is None or len(Y) == 0:
        raise ContractError("evaluation set is empty")
    tasks = range(model.K) if tasks is None else tasks
    base = accuracies(model, X, Y, importances, routed)
    M = np.zeros((model.K, model.K))
    pruned = [0] * model.K
    safe = np.where(base > 0, base, 1.0)
    for p in tasks:
        masks = dominant_filters(model, profile, p)
        trial = model.copy()
        for l, mask in masks.items():
            trial.shared[l].w[mask] = 0.0
            pruned[p] += int(mask.sum())
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NormFloorWarning)
            acc = accuracies(trial, X, Y, importances, routed)
        M[p] = np.where(base > 0, (base - acc) / safe, 0.0)
    return DegradationMatrix(M, pruned, base)


# ---------------------------------------------------------------------------
# similarity, relative drop
# ---------------------------------------------------------------------------

def structure_similarity(a, b) -> float:
    """Cosine of two flattened (nonnegative) importance vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractError("importance vectors differ in size")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("structure similarity undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), 0.0, 1.0))


def similarity_matrix(model: MultiOutputModel, profile: ImportanceProfile, layers=None) -> np.ndarray:
    """Pairwise structure similarity. Each pair is compared on the shared
    layers both tasks use unless ``layers`` fixes the set."""
    K = model.K
    S = np.eye(K)
    for a in range(K):
        for b in range(a + 1, K):
            common = _common_layers(model, a, b) if layers is None else list(layers)
            if not common:
                S[a, b] = S[b, a] = float("nan")
                continue
            S[a, b] = S[b, a] = structure_similarity(profile.flat(a, common), profile.flat(b, common))
    return S


def delta_m(M_m, M_0, higher_better) -> float:
    """Average relative drop against the baseline; negative means better.

    Lower-better metrics enter with the opposite sign.
    """
    M_m = np.asarray(M_m, dtype=np.float64).ravel()
    M_0 = np.asarray(M_0, dtype=np.float64).ravel()
    flags = np.broadcast_to(np.asarray(higher_better, dtype=bool), M_0.shape)
    if M_m.shape != M_0.shape:
        raise ContractError("metric vectors differ in length")
    if M_0.size == 0:
        raise ContractError("no metrics given")
    if np.any(M_0 == 0):
        raise ContractError("zero baseline metric")
    sign = np.where(flags, -1.0, 1.0)
    return float(np.mean(sign * (M_m - M_0) / M_0))


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def write_table(path, rows: list[dict], columns: list[str] | None = None) -> Path:
    """Comma-separated table, one row per record; floats written with repr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in columns])
    return path


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def matrix_rows(M: np.ndarray, row_name: str = "row") -> list[dict]:
    return [{row_name: i, **{f"c{j}": float(M[i, j]) for j in range(M.shape[1])}} for i in range(M.shape[0])]
