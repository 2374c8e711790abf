"""Dense float64 arrays, a small tape-based reverse-mode autodiff engine, and
the seeded random source used everywhere else in the package.

Tensors are plain ``numpy.ndarray`` objects (C order, float64). The autodiff
engine records every operation on a :class:`Graph`; :func:`grad` walks the
node list backwards exactly once.
"""
from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

NORM_FLOOR = 1e-12
DTYPE = np.float64


class ContractError(ValueError):
    """A precondition of a public operation was violated."""


class NumericError(ArithmeticError):
    """A NaN/Inf appeared where a finite value is required."""


class NormFloorWarning(RuntimeWarning):
    """A zero-norm filter was divided by the floor constant."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE, order="C")


# ---------------------------------------------------------------------------
# autodiff
# ---------------------------------------------------------------------------

@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    """Handle to one node of a :class:`Graph`."""

    __slots__ = ("graph", "idx")
    __array_priority__ = 100

    def __init__(self, graph: "Graph", idx: int):
        self.graph = graph
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.idx].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        node = self.graph.nodes[self.idx]
        return f"Var(#{self.idx} {node.op} shape={node.value.shape})"

    def __add__(self, other):
        return self.graph.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.graph.sub(self, other)

    def __rsub__(self, other):
        return self.graph.sub(other, self)

    def __mul__(self, other):
        return self.graph.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.graph.div(self, other)

    def __rtruediv__(self, other):
        return self.graph.div(other, self)

    def __neg__(self):
        return self.graph.mul(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return self.graph.sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return self.graph.mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.graph.reshape(self, shape)


class Graph:
    """Append-only record of operations.

    Parents always precede children in ``nodes`` so the graph is acyclic by
    construction. Trainable leaves are registered by name in ``params``.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, int] = {}

    # -- leaves -------------------------------------------------------------
    def _push(self, op, parents, value, vjp=None) -> Var:
        self.nodes.append(_Node(op, tuple(parents), value, vjp))
        return Var(self, len(self.nodes) - 1)

    def const(self, value) -> Var:
        return self._push("const", (), as_tensor(value))

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        v = self._push("param", (), as_tensor(value).copy())
        self.params[name] = v.idx
        return v

    def _lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.graph is not self:
                raise ContractError("operands belong to different graphs")
            return x
        return self.const(x)

    # -- elementwise ----------------------------------------------------------
    def add(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        sa, sb = a.shape, b.shape
        return self._push("add", (a.idx, b.idx), a.value + b.value,
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        sa, sb = a.shape, b.shape
        return self._push("sub", (a.idx, b.idx), a.value - b.value,
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))

    def mul(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        return self._push("mul", (a.idx, b.idx), av * bv,
                          lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def div(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        out = av / bv
        return self._push("div", (a.idx, b.idx), out,
                          lambda g: (_unbroadcast(g / bv, av.shape),
                                     _unbroadcast(-g * out / bv, bv.shape)))

    def square(self, a) -> Var:
        a = self._lift(a)
        av = a.value
        return self._push("square", (a.idx,), av * av, lambda g: (2.0 * av * g,))

    def sqrt(self, a) -> Var:
        a = self._lift(a)
        out = np.sqrt(a.value)
        return self._push("sqrt", (a.idx,), out, lambda g: (0.5 * g / out,))

    def relu(self, a) -> Var:
        a = self._lift(a)
        mask = a.value > 0
        # np.maximum keeps NaN visible downstream
        return self._push("relu", (a.idx,), np.maximum(a.value, 0.0), lambda g: (g * mask,))

    def clamp_min(self, a, floor: float) -> Var:
        """max(a, floor) with zero gradient where the floor is active."""
        a = self._lift(a)
        mask = a.value >= floor
        return self._push("clamp_min", (a.idx,), np.where(mask, a.value, floor),
                          lambda g: (g * mask,))

    # -- shape / reductions ---------------------------------------------------
    def reshape(self, a, shape) -> Var:
        a = self._lift(a)
        old = a.shape
        return self._push("reshape", (a.idx,), a.value.reshape(shape), lambda g: (g.reshape(old),))

    def sum(self, a, axis=None, keepdims=False) -> Var:
        a = self._lift(a)
        shape = a.shape
        out = a.value.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return self._push("sum", (a.idx,), np.asarray(out, dtype=DTYPE), vjp)

    def mean(self, a) -> Var:
        a = self._lift(a)
        n = a.value.size
        return self.mul(self.sum(a), 1.0 / n)

    def matmul(self, a, b) -> Var:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ContractError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
        return self._push("matmul", (a.idx, b.idx), av @ bv, lambda g: (g @ bv.T, av.T @ g))

    def transpose(self, a) -> Var:
        a = self._lift(a)
        return self._push("transpose", (a.idx,), a.value.T.copy(), lambda g: (g.T,))

    # -- losses -----------------------------------------------------------------
    def softmax_cross_entropy(self, logits, labels) -> Var:
        """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
        logits = self._lift(logits)
        z = logits.value
        labels = np.asarray(labels, dtype=np.int64)
        if z.ndim != 2 or labels.shape != (z.shape[0],):
            raise ContractError(f"logits {z.shape} incompatible with labels {labels.shape}")
        shifted = z - z.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        rows = np.arange(z.shape[0])
        loss = -logp[rows, labels].mean()

        def vjp(g):
            p = np.exp(logp)
            p[rows, labels] -= 1.0
            return (g * p / z.shape[0],)

        return self._push("softmax_xent", (logits.idx,), np.asarray(loss), vjp)

    def mse(self, pred, target) -> Var:
        pred = self._lift(pred)
        diff = pred - self._lift(target)
        return self.mean(self.square(diff))


def grad(graph: Graph, loss: Var) -> dict[str, np.ndarray]:
    """Gradient of the scalar ``loss`` with respect to every registered parameter."""
    if loss.graph is not graph:
        raise ContractError("loss node belongs to another graph")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
    nodes = graph.nodes
    adj: list[np.ndarray | None] = [None] * (loss.idx + 1)
    adj[loss.idx] = np.ones_like(loss.value)
    for i in range(loss.idx, -1, -1):
        g = adj[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            adj[p] = gp if adj[p] is None else adj[p] + gp
    out = {}
    for name, idx in graph.params.items():
        g = adj[idx] if idx <= loss.idx else None
        out[name] = np.zeros_like(nodes[idx].value) if g is None else np.asarray(g, dtype=DTYPE)
    if not (np.isfinite(loss.value).all() and all(np.isfinite(g).all() for g in out.values())):
        for i in range(loss.idx + 1):
            if not np.isfinite(nodes[i].value).all():
                raise NumericError(f"non-finite value at node #{i} ({nodes[i].op})")
        raise NumericError("non-finite gradient")
    return out


def finite_diff(fn: Callable[[Sequence[np.ndarray]], float], params: Sequence[np.ndarray],
                h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of the scalar function ``fn(params)``."""
    if h <= 0:
        raise ContractError("step h must be positive")
    params = [as_tensor(p).copy() for p in params]
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(fn(params))
            flat[j] = orig - h
            fm = float(fn(params))
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


# ---------------------------------------------------------------------------
# filter normalization
# ---------------------------------------------------------------------------

def _filter_axes(ndim: int) -> tuple[int, ...]:
    if ndim < 3:
        raise ContractError("filter tensors are m x n x (filter dims)")
    return tuple(range(2, ndim))


def filter_norms(w) -> np.ndarray:
    """Euclidean norm of every (i, j) filter slice, shape m x n."""
    w = as_tensor(w)
    return np.sqrt((w * w).sum(axis=_filter_axes(w.ndim)))


def filter_normalize(w) -> np.ndarray:
    """Divide each (i, j) filter slice by its own norm (floored at 1e-12)."""
    w = as_tensor(w)
    norms = filter_norms(w)
    if np.any(norms < NORM_FLOOR):
        warnings.warn("zero-norm filter divided by the norm floor", NormFloorWarning, stacklevel=2)
    norms = np.maximum(norms, NORM_FLOOR)
    return w / norms.reshape(norms.shape + (1,) * (w.ndim - 2))


def filter_normalize_var(g: Graph, w: Var) -> Var:
    """Differentiable counterpart of :func:`filter_normalize`."""
    axes = _filter_axes(len(w.shape))
    sq = g.square(w)
    for ax in reversed(axes):
        sq = g.sum(sq, axis=ax, keepdims=True)
    norm = g.sqrt(g.clamp_min(sq, NORM_FLOOR ** 2))
    return g.div(w, norm)


# ---------------------------------------------------------------------------
# rng
# ---------------------------------------------------------------------------

@dataclass
class Rng:
    """Seeded random source (PCG64). Same (algorithm, seed) -> same stream."""

    seed: int
    algorithm: str = "pcg64"
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.algorithm != "pcg64":
            raise ContractError(f"unknown rng algorithm {self.algorithm!r}")
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, size, scale=1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size)

    def uniform(self, size, low=0.0, high=1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def integers(self, high, size=None):
        return self._gen.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, *keys: int) -> "Rng":
        """Child stream determined only by this seed and ``keys``."""
        ss = np.random.SeedSequence([self.seed, *keys])
        return Rng(int(ss.generate_state(1, np.uint64)[0]))


# ---------------------------------------------------------------------------
# tensor container
# ---------------------------------------------------------------------------
# Layout: b"DRT1" | u32 count | per tensor: u16 name_len, name utf-8,
# u8 ndim, ndim x u32 extents, little-endian f64 payload (row-major).

_MAGIC = b"DRT1"


def dump_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = as_tensor(tensors[name])
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f8").tobytes(order="C"))
    return buf.getvalue()


def load_tensors(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != _MAGIC:
        raise ContractError("not a tensor container (bad magic)")
    off = 4
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(DTYPE).reshape(shape)
        off += 8 * n
        out[name] = arr
    if off != len(data):
        raise ContractError("trailing bytes in tensor container")
    return out
