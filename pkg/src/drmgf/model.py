"""Multi-output networks: a shared trunk of dense "filter" layers, K task
heads, and per-task importance variables on the shared layers.

A shared layer's weight has shape ``m x n x s x s``: ``m`` output channels,
``n`` input channels, and an ``s x s`` filter per connection. As a dense layer
the input width is ``n * s * s``. The importance-augmented forward pass of
task k replaces every shared weight by ``lateral_normalize(nu_k) * w / ||w||``
(norm taken per filter).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numcore import (
    ContractError,
    Graph,
    Rng,
    Var,
    as_tensor,
    dump_tensors,
    filter_norms,
    filter_normalize,
    filter_normalize_var,
    load_tensors,
)

DEFAULT_EPS = 1e-4
LATERAL_SCALE = 0.1
CHECKPOINT_VERSION = 1


@dataclass
class LayerWeights:
    w: np.ndarray
    b: np.ndarray | None = None

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]

    @property
    def in_dim(self) -> int:
        return int(np.prod(self.w.shape[1:]))

    def copy(self) -> "LayerWeights":
        return LayerWeights(self.w.copy(), None if self.b is None else self.b.copy())


def dense_layer(rng: Rng, out_dim: int, n: int, s: int = 1, bias: bool = True) -> LayerWeights:
    fan_in = n * s * s
    w = rng.normal((out_dim, n, s, s), scale=np.sqrt(2.0 / fan_in))
    return LayerWeights(w, np.zeros(out_dim) if bias else None)


# ---------------------------------------------------------------------------
# importance variables
# ---------------------------------------------------------------------------

def lateral_normalize(nu, eps: float = DEFAULT_EPS) -> np.ndarray:
    """nu / sqrt(eps + 0.1 * row sum over input channels)."""
    nu = as_tensor(nu)
    if eps < 0:
        raise ContractError("eps must be nonnegative")
    if np.any(nu < 0):
        raise ContractError("importance variables must be nonnegative")
    denom = np.sqrt(eps + LATERAL_SCALE * nu.sum(axis=1, keepdims=True))
    # eps = 0 leaves all-zero rows at 0 / 0; their output is 0
    return nu / np.where(denom > 0, denom, 1.0)


def lateral_normalize_var(g: Graph, nu: Var, eps: float = DEFAULT_EPS) -> Var:
    denom = g.sqrt(g.add(g.mul(g.sum(nu, axis=1, keepdims=True), LATERAL_SCALE), eps))
    return g.div(nu, denom)


def importance_decay_loss(nus) -> float:
    """Sum of squares over every entry of every given importance tensor."""
    if isinstance(nus, np.ndarray):
        nus = [nus]
    return float(sum(np.sum(as_tensor(v) ** 2) for v in nus if v is not None))


def reconstruct_importance(w, eps: float = DEFAULT_EPS) -> np.ndarray:
    """nu whose lateral normalization equals the per-filter norms of ``w``.

    With row target sum T, the row sum S of nu solves S**2 = T**2 (eps + 0.1 S).
    """
    t = filter_norms(w)
    T = t.sum(axis=1, keepdims=True)
    S = 0.5 * (LATERAL_SCALE * T**2 + np.sqrt(LATERAL_SCALE**2 * T**4 + 4.0 * eps * T**2))
    return t * np.sqrt(eps + LATERAL_SCALE * S)


@dataclass
class ImportanceSet:
    """``nu[k][l]``: task k's importance on shared layer l (None if unused)."""

    nu: list[list[np.ndarray | None]]
    eps: float = DEFAULT_EPS

    @property
    def K(self) -> int:
        return len(self.nu)

    def copy(self) -> "ImportanceSet":
        return ImportanceSet([[None if v is None else v.copy() for v in row] for row in self.nu], self.eps)

    def normalized(self, k: int, l: int) -> np.ndarray:
        return lateral_normalize(self.nu[k][l], self.eps)

    def clamp_(self) -> None:
        for row in self.nu:
            for v in row:
                if v is not None:
                    np.maximum(v, 0.0, out=v)


def init_importances(model: "MultiOutputModel", rng: Rng, mode: str = "kaiming-abs",
                     eps: float = DEFAULT_EPS) -> ImportanceSet:
    """Initial task-importance variables for every (task, shared layer it uses).

    ``kaiming-abs``: |N(0, 2/n)| drawn once per layer and given to every task,
    so all routes start from the same point; ``kaiming-abs-independent`` draws
    per task; ``constant`` sets every entry to 1; ``identity`` reconstructs
    the current weights exactly.
    """
    nu: list[list[np.ndarray | None]] = [[None] * len(model.shared) for _ in range(model.K)]
    for l, layer in enumerate(model.shared):
        m, n = layer.w.shape[:2]
        common = np.abs(rng.normal((m, n), scale=np.sqrt(2.0 / n)))
        for k in model.users(l):
            if mode == "kaiming-abs":
                nu[k][l] = common.copy()
            elif mode == "kaiming-abs-independent":
                nu[k][l] = np.abs(rng.normal((m, n), scale=np.sqrt(2.0 / n)))
            elif mode == "constant":
                nu[k][l] = np.ones((m, n))
            elif mode == "identity":
                nu[k][l] = reconstruct_importance(layer.w, eps)
            else:
                raise ContractError(f"unknown importance init {mode!r}")
    return ImportanceSet(nu, eps)


def effective_weights(w, nu, eps: float = DEFAULT_EPS) -> np.ndarray:
    """lateral_normalize(nu) broadcast over each filter times w / ||w||."""
    w = as_tensor(w)
    nh = lateral_normalize(nu, eps)
    return nh.reshape(nh.shape + (1,) * (w.ndim - 2)) * filter_normalize(w)


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

@dataclass
class MultiOutputModel:
    """Shared dense trunk plus K heads.

    ``attach[k]`` is the number of shared layers feeding head k. Each head is
    a list of dense layers (ReLU between them, none after the last).
    """

    shared: list[LayerWeights]
    heads: list[list[LayerWeights]]
    attach: list[int]
    kind: str = "multi-exit"

    def __post_init__(self):
        if len(self.heads) != len(self.attach):
            raise ContractError("one attachment depth per head")
        for l in range(len(self.shared)):
            if self.K > 1 and len(self.users(l)) < 2:
                raise ContractError(f"shared layer {l} is used by fewer than two heads")

    @property
    def K(self) -> int:
        return len(self.heads)

    def users(self, l: int) -> list[int]:
        return [k for k, d in enumerate(self.attach) if d > l]

    def task_layers(self, k: int) -> range:
        return range(self.attach[k])

    def copy(self) -> "MultiOutputModel":
        return MultiOutputModel([L.copy() for L in self.shared],
                                [[L.copy() for L in h] for h in self.heads],
                                list(self.attach), self.kind)

    # -- forward ------------------------------------------------------------
    def head_forward(self, g: Graph, h: Var, head: list[tuple[Var, Var | None]]) -> Var:
        for j, (w, b) in enumerate(head):
            h = _dense(g, h, w, b)
            if j < len(head) - 1:
                h = g.relu(h)
        return h

    def task_output(self, g: Graph, X, k: int, shared: list[tuple[Var, Var | None]],
                    head: list[tuple[Var, Var | None]]) -> Var:
        X = as_tensor(X)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ContractError(f"input shape {X.shape} does not match model input {self.input_dim}")
        h = g.const(X)
        for l in self.task_layers(k):
            w, b = shared[l]
            h = g.relu(_dense(g, h, w, b))
        return self.head_forward(g, h, head)

    def outputs(self, g: Graph, X, tasks, shared: list[tuple[Var, Var | None]],
                heads: list[list[tuple[Var, Var | None]]]) -> dict[int, Var]:
        """Outputs of several heads; the trunk is evaluated once.

        ``shared`` may also be a callable ``k -> shared`` when tasks need
        different effective weights.
        """
        if callable(shared):
            return {k: self.task_output(g, X, k, shared(k), heads[k]) for k in tasks}
        X = as_tensor(X)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ContractError(f"input shape {X.shape} does not match model input {self.input_dim}")
        want = sorted(tasks)
        out = {}
        h = g.const(X)
        depth = 0
        for k in sorted(want, key=lambda t: self.attach[t]):
            while depth < self.attach[k]:
                w, b = shared[depth]
                h = g.relu(_dense(g, h, w, b))
                depth += 1
            out[k] = self.head_forward(g, h, heads[k])
        return out

    def task_loss(self, g: Graph, logits: Var, y) -> Var:
        return g.softmax_cross_entropy(logits, y)

    @property
    def input_dim(self) -> int:
        if self.shared:
            return self.shared[0].in_dim
        return self.heads[0][0].in_dim

    # -- serialization --------------------------------------------------------
    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for l, L in enumerate(self.shared):
            out[f"shared.{l}.w"] = L.w
            if L.b is not None:
                out[f"shared.{l}.b"] = L.b
        for k, head in enumerate(self.heads):
            for j, L in enumerate(head):
                out[f"head.{k}.{j}.w"] = L.w
                if L.b is not None:
                    out[f"head.{k}.{j}.b"] = L.b
        return out

    def topology(self) -> dict:
        return {"kind": self.kind, "attach": list(self.attach),
                "shared": len(self.shared), "heads": [len(h) for h in self.heads]}


def _dense(g: Graph, h: Var, w: Var, b: Var | None) -> Var:
    W = g.reshape(w, (w.shape[0], -1))
    out = g.matmul(h, g.transpose(W))
    return out if b is None else g.add(out, b)


def multi_exit_mlp(rng: Rng, in_dim: int, classes: int, width: int = 64, depth: int = 4,
                   s: int = 1) -> MultiOutputModel:
    """``depth`` hidden layers with one exit after each.

    The last hidden layer feeds only the deepest exit, so it is stored in that
    exit's head rather than in the shared trunk.
    """
    if depth < 2:
        raise ContractError("a multi-exit network needs at least two exits")
    ff = s * s
    for d in (in_dim, width):
        if d % ff:
            raise ContractError(f"width {d} not divisible by filter size {ff}")
    shared = []
    fan = in_dim
    for _ in range(depth - 1):
        shared.append(dense_layer(rng, width, fan // ff, s))
        fan = width
    heads = [[dense_layer(rng, classes, width, 1)] for _ in range(depth - 1)]
    heads.append([dense_layer(rng, width, width, 1), dense_layer(rng, classes, width, 1)])
    attach = list(range(1, depth)) + [depth - 1]
    return MultiOutputModel(shared, heads, attach, "multi-exit")


def multi_task_mlp(rng: Rng, in_dim: int, classes: list[int], width: int = 64, depth: int = 4,
                   s: int = 1) -> MultiOutputModel:
    """``depth`` shared hidden layers and one linear head per task on top."""
    ff = s * s
    for d in (in_dim, width):
        if d % ff:
            raise ContractError(f"width {d} not divisible by filter size {ff}")
    shared = []
    fan = in_dim
    for _ in range(depth):
        shared.append(dense_layer(rng, width, fan // ff, s))
        fan = width
    heads = [[dense_layer(rng, c, width, 1)] for c in classes]
    return MultiOutputModel(shared, heads, [depth] * len(classes), "multi-task")


# ---------------------------------------------------------------------------
# binding parameters onto a graph
# ---------------------------------------------------------------------------

@dataclass
class Bound:
    """Graph handles for one forward pass of a model."""

    graph: Graph
    shared: list[tuple[Var, Var | None]]        # raw w, b
    heads: list[list[tuple[Var, Var | None]]]
    nu: dict[int, Var] = field(default_factory=dict)
    effective: list[tuple[Var, Var | None]] | None = None


def bind(g: Graph, model: MultiOutputModel, *, trainable_heads=None, trainable_shared: bool = True) -> Bound:
    """Register the model's tensors on ``g``; frozen ones become constants."""
    heads_on = set(range(model.K)) if trainable_heads is None else set(trainable_heads)

    def reg(name, value, train):
        if value is None:
            return None
        return g.param(name, value) if train else g.const(value)

    shared = [(reg(f"shared.{l}.w", L.w, trainable_shared), reg(f"shared.{l}.b", L.b, trainable_shared))
              for l, L in enumerate(model.shared)]
    heads = [[(reg(f"head.{k}.{j}.w", L.w, k in heads_on), reg(f"head.{k}.{j}.b", L.b, k in heads_on))
              for j, L in enumerate(head)] for k, head in enumerate(model.heads)]
    return Bound(g, shared, heads)


def augment(bound: Bound, model: MultiOutputModel, importances: ImportanceSet | str, k: int,
            train_nu: bool = True) -> list[tuple[Var, Var | None]]:
    """Effective shared weights of task k on ``bound.graph``.

    ``importances == "identity"`` pins the normalized importance to the live
    filter norms, which reproduces the raw weights exactly.
    """
    g = bound.graph
    eff = []
    for l in range(len(model.shared)):
        w, b = bound.shared[l]
        if l not in model.task_layers(k):
            eff.append((w, b))
            continue
        direction = filter_normalize_var(g, w)
        if isinstance(importances, str):
            if importances != "identity":
                raise ContractError(f"unknown importance mode {importances!r}")
            sq = g.square(w)
            for ax in range(len(w.shape) - 1, 1, -1):
                sq = g.sum(sq, axis=ax, keepdims=True)
            scale = g.sqrt(sq)
        else:
            nu = importances.nu[k][l]
            if nu is None:
                raise ContractError(f"task {k} has no importance on shared layer {l}")
            v = g.param(f"nu.{l}", nu) if train_nu else g.const(nu)
            if train_nu:
                bound.nu[l] = v
            nh = lateral_normalize_var(g, v, importances.eps)
            scale = g.reshape(nh, nh.shape + (1,) * (len(w.shape) - 2))
        eff.append((g.mul(scale, direction), b))
    bound.effective = eff
    return eff


def forward_task(model: MultiOutputModel, importances: ImportanceSet | str, k: int, X) -> np.ndarray:
    """Task-k predictions with every shared filter replaced by its effective weight."""
    if not 0 <= k < model.K:
        raise ContractError(f"task index {k} out of range")
    g = Graph()
    bound = bind(g, model, trainable_heads=(), trainable_shared=False)
    eff = augment(bound, model, importances, k, train_nu=False)
    return model.task_output(g, X, k, eff, bound.heads[k]).value


def plain_forward(model: MultiOutputModel, k: int, X) -> np.ndarray:
    if not 0 <= k < model.K:
        raise ContractError(f"task index {k} out of range")
    g = Graph()
    bound = bind(g, model, trainable_heads=(), trainable_shared=False)
    return model.task_output(g, X, k, bound.shared, bound.heads[k]).value


def bake(model: MultiOutputModel, importances: ImportanceSet, k: int) -> MultiOutputModel:
    """Copy of ``model`` whose shared weights are task k's effective weights."""
    out = model.copy()
    for l in model.task_layers(k):
        out.shared[l].w = effective_weights(model.shared[l].w, importances.nu[k][l], importances.eps)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# Layout: b"DRCK" | u32 version | u32 header_len | JSON topology header |
# tensor container (numcore.dump_tensors).

def dump_checkpoint(model: MultiOutputModel, importances: ImportanceSet | None = None,
                    extra: dict | None = None) -> bytes:
    tensors = dict(model.tensors())
    if importances is not None:
        for k, row in enumerate(importances.nu):
            for l, v in enumerate(row):
                if v is not None:
                    tensors[f"nu.{k}.{l}"] = v
    header = {"topology": model.topology(), "eps": None if importances is None else importances.eps,
              "extra": extra or {}}
    raw = json.dumps(header, sort_keys=True).encode()
    return b"DRCK" + struct.pack("<II", CHECKPOINT_VERSION, len(raw)) + raw + dump_tensors(tensors)


def load_checkpoint(data: bytes) -> tuple[MultiOutputModel, ImportanceSet | None, dict]:
    if data[:4] != b"DRCK":
        raise ContractError("not a model checkpoint")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen])
    t = load_tensors(data[12 + hlen:])
    topo = header["topology"]
    shared = [LayerWeights(t[f"shared.{l}.w"], t.get(f"shared.{l}.b")) for l in range(topo["shared"])]
    heads = [[LayerWeights(t[f"head.{k}.{j}.w"], t.get(f"head.{k}.{j}.b")) for j in range(nj)]
             for k, nj in enumerate(topo["heads"])]
    model = MultiOutputModel(shared, heads, topo["attach"], topo["kind"])
    imp = None
    if header["eps"] is not None:
        nu = [[t.get(f"nu.{k}.{l}") for l in range(len(shared))] for k in range(model.K)]
        imp = ImportanceSet(nu, header["eps"])
    return model, imp, header["extra"]
