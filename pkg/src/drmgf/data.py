"""Synthetic Gaussian-cluster data and CSV datasets for the benchmarks."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DatasetSpec
from .numcore import ContractError, Rng


class ParseError(ContractError):
    """Malformed CSV input; the message names the offending line."""


@dataclass
class Dataset:
    """Train/test split. ``Y`` holds one integer label column per task."""

    X_train: np.ndarray
    Y_train: np.ndarray
    X_test: np.ndarray
    Y_test: np.ndarray
    classes: list[int]
    mode: str = "multi-exit"

    @property
    def K(self) -> int:
        return self.Y_train.shape[1]

    def batches(self, epoch: int, seed: int, batch_size: int):
        """Reshuffled mini-batches of the training split for one epoch."""
        order = Rng(seed).spawn(epoch, 1).permutation(len(self.X_train))
        return [(self.X_train[order[i:i + batch_size]], self.Y_train[order[i:i + batch_size]])
                for i in range(0, len(order), batch_size)]

    def meta_batch(self, epoch: int, seed: int, batch_size: int):
        order = Rng(seed).spawn(epoch, 2).permutation(len(self.X_train))[:batch_size]
        return self.X_train[order], self.Y_train[order]

    def fingerprint(self) -> bytes:
        return b"".join(a.tobytes() for a in (self.X_train, self.Y_train, self.X_test, self.Y_test))


def _split(X, Y, spec: DatasetSpec, rng: Rng, classes, mode) -> Dataset:
    order = rng.permutation(len(X))
    n_train = int(round(spec.splits[0] * len(X)))
    tr, te = order[:n_train], order[n_train:]
    return Dataset(X[tr], Y[tr], X[te], Y[te], list(classes), mode)


def gen_synthetic(spec: DatasetSpec, seed: int) -> Dataset:
    """Gaussian clusters; multi-exit copies one label to every exit.

    Multi-exit: each class owns two centers, so the classes are not linearly
    separable in general and deeper exits can profit from extra capacity.
    Multi-task: ``2 * classes`` latent clusters; every task maps them onto its
    classes through its own random grouping.
    """
    spec.validate()
    if spec.kind != "synthetic-clusters":
        raise ContractError(f"gen_synthetic cannot build {spec.kind!r} data")
    rng = Rng(seed).spawn(0xDA7A)
    n, d, c = spec.size, spec.dim, spec.classes
    if spec.mode == "multi-exit":
        centers = rng.normal((c, 2, d)) * spec.separation / np.sqrt(d) * 2.0
        y = np.arange(n) % c
        y = y[rng.permutation(n)]
        sub = rng.integers(2, size=n)
        X = centers[y, sub] + spec.noise / np.sqrt(d) * rng.normal((n, d))
        Y = np.repeat(y[:, None], spec.tasks, axis=1)
        classes = [c] * spec.tasks
    elif spec.mode == "multi-task":
        centers = rng.normal((c * 2, d)) * spec.separation / np.sqrt(d) * 2.0
        z = np.arange(n) % (c * 2)
        z = z[rng.permutation(n)]
        X = centers[z] + spec.noise / np.sqrt(d) * rng.normal((n, d))
        # each task groups the latent clusters into classes differently
        Y = np.stack([rng.permutation(c * 2)[z] % c for _ in range(spec.tasks)], axis=1)
        classes = [c] * spec.tasks
    else:
        raise ContractError(f"unknown dataset mode {spec.mode!r}")
    return _split(X.astype(np.float64), Y.astype(np.int64), spec, rng, classes, spec.mode)


# ---------------------------------------------------------------------------
# csv
# ---------------------------------------------------------------------------

def load_csv(path: str | Path, spec: DatasetSpec, seed: int = 0) -> Dataset:
    """Parse, validate and split a CSV file by ``spec.splits`` (seeded shuffle)."""
    X, Y = read_csv_arrays(path, spec)
    if Y.shape[1] == 1 and spec.mode == "multi-exit":
        Y = np.repeat(Y, spec.tasks, axis=1)
    classes = [int(Y[:, t].max()) + 1 for t in range(Y.shape[1])]
    return _split(X, Y, spec, Rng(seed).spawn(0xC5F), classes, spec.mode)


def read_csv_arrays(path: str | Path, spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Header row names feature columns then ``spec.label_columns`` label columns."""
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(f"{path}: empty file (line 1)") from None
    n_lab = spec.label_columns
    n_feat = len(header) - n_lab
    if n_lab < 1 or n_feat < 1:
        raise ParseError(f"{path}: line 1: need at least one feature and {n_lab} label column(s)")
    if spec.dim and n_feat != spec.dim:
        raise ParseError(f"{path}: line 1: header declares {n_feat} features, expected {spec.dim}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}: line {lineno}: expected {len(header)} cells, got {len(row)}")
        try:
            rows.append([float(x) for x in row])
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: non-numeric cell") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    arr = np.array(rows, dtype=np.float64)
    X = arr[:, :n_feat]
    labels = arr[:, n_feat:]
    if np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise ParseError(f"{path}: label columns must hold nonnegative integers")
    return X, labels.astype(np.int64)


def save_csv(path: str | Path, X: np.ndarray, Y: np.ndarray) -> None:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(X.shape[1])] + [f"y{t}" for t in range(Y.shape[1])])
        for x, y in zip(X, Y):
            w.writerow([repr(float(v)) for v in x] + [str(int(v)) for v in y])
