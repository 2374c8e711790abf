"""Two-task conflict toy: two shared parameters, one scalar head per task.

Task k's loss is ``0.5 * ||A_k w + b_k theta_k - c_k||**2`` with ``w`` the
shared pair (w1, w2). Both losses are convex with a unique zero-loss
minimizer; the shared-space minimizers differ, so on the segment between
them the two task gradients on ``w`` point in opposite directions.

Each shared parameter is its own 1x1 filter. Under weight normalization a
1x1 filter keeps only its sign, so the task-specific magnitudes live in the
importance variables; both minimizers therefore lie in the positive quadrant.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import DatasetSpec, RunConfig
from .metagf import run_method
from .model import LayerWeights, MultiOutputModel
from .numcore import ContractError, Graph, Var
from .trainers import SgdState, single_task_sgd_step

# published landscape constants
TOY_MINIMIZERS = np.array([[0.5, 2.0], [2.0, 0.5]])
TOY_HEAD_OPTIMA = np.array([1.0, -1.0])
TOY_COUPLING = np.array([[0.5, 0.0], [0.0, 0.5]])     # third residual row of A_k
TOY_INIT_W = np.array([0.5, 0.5])
TOY_INIT_THETA = np.array([0.0, 0.0])


def _matrices(k: int):
    A = np.vstack([np.eye(2), TOY_COUPLING[k]])
    b = np.array([0.0, 0.0, 1.0])
    c = A @ TOY_MINIMIZERS[k] + b * TOY_HEAD_OPTIMA[k]
    return A, b, c


_MATS = [_matrices(k) for k in range(2)]


def toy_matrices(k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(A_k, b_k, c_k) of task k's residual."""
    return _MATS[k]


def toy_loss(k: int, w, theta: float) -> float:
    A, b, c = toy_matrices(k)
    r = A @ np.asarray(w, dtype=np.float64).ravel() + b * float(theta) - c
    return 0.5 * float(r @ r)


class ToyModel(MultiOutputModel):
    """Two-task quadratic landscape behind the multi-output model interface."""

    def __init__(self, w=TOY_INIT_W, theta=TOY_INIT_THETA):
        shared = [LayerWeights(np.asarray(w, dtype=np.float64).reshape(1, 2, 1, 1).copy())]
        heads = [[LayerWeights(np.full((1, 1, 1, 1), float(t)))] for t in theta]
        super().__init__(shared, heads, [1, 1], "toy")

    def copy(self) -> "ToyModel":
        out = ToyModel.__new__(ToyModel)
        MultiOutputModel.__init__(out, [L.copy() for L in self.shared],
                                  [[L.copy() for L in h] for h in self.heads], list(self.attach), "toy")
        return out

    @property
    def input_dim(self) -> int:
        return 0

    def task_output(self, g: Graph, X, k: int, shared, head) -> Var:
        A, b, c = toy_matrices(k)
        w = g.reshape(shared[0][0], (2, 1))
        theta = g.reshape(head[0][0], (1, 1))
        r = g.add(g.matmul(g.const(A), w), g.mul(g.const(b.reshape(3, 1)), theta))
        return g.sub(r, c.reshape(3, 1))

    def outputs(self, g: Graph, X, tasks, shared, heads) -> dict[int, Var]:
        return {k: self.task_output(g, X, k, shared(k) if callable(shared) else shared, heads[k])
                for k in tasks}

    def task_loss(self, g: Graph, out: Var, y) -> Var:
        return g.mul(g.sum(g.square(out)), 0.5)


@dataclass
class ToyData:
    """Deterministic full-batch "dataset": every step sees the whole landscape."""

    steps_per_epoch: int = 5
    X_train: None = None
    Y_train: None = None
    X_test: None = None
    Y_test: None = None

    def batches(self, epoch: int, seed: int, batch_size: int):
        return [(None, None)] * self.steps_per_epoch

    def meta_batch(self, epoch: int, seed: int, batch_size: int):
        return None, None


def toy_config(method: str = "dr-mgf", epochs: int = 2000, seed: int = 0) -> RunConfig:
    """Toy settings: the auxiliary weight is 0 so each task's route can reach
    its own optimum, and both learning rates are 0.1."""
    return RunConfig(method=method, seed=seed, max_iter=epochs, beta=0.0, lr=0.1, lr_nu=0.1,
                     data=DatasetSpec(kind="toy2d")).validate()


@dataclass
class ToyRun:
    method: str
    trajectory: list[list[float]]                 # shared (w1, w2) per epoch
    task_points: list[list[list[float]]]          # per epoch, per task effective (w1, w2)
    losses: list[list[float]]                     # per epoch, per task
    final_losses: list[float]
    diverged: bool = False


@dataclass
class ToyResult:
    runs: dict[str, ToyRun]
    optima: list[float]
    optimum_points: list[list[float]]
    independent: list[ToyRun] = field(default_factory=list)


def train_independent(k: int, epochs: int = 2000, steps_per_epoch: int = 5, lr: float = 0.1,
                      momentum: float = 0.9) -> ToyRun:
    """Plain SGD on task k alone from the shared initialization."""
    model = ToyModel()
    state = SgdState(lr, momentum, 0.0)
    traj, losses = [], []
    for _ in range(epochs):
        for _ in range(steps_per_epoch):
            single_task_sgd_step(model, k, (None, None), state)
        w = model.shared[0].w.ravel()
        traj.append(w.tolist())
        losses.append([toy_loss(k, w, model.heads[k][0].w.item())])
    return ToyRun(f"independent-{k}", traj, [], losses, losses[-1])


def _effective_point(result, k: int) -> np.ndarray:
    from .model import effective_weights

    w = result.model.shared[0].w
    if result.routed:
        return effective_weights(w, result.importances.nu[k][0], result.importances.eps).ravel()
    return w.ravel()


def toy_problem(methods=("dr-mgf", "sgd-joint", "pcgrad"), epochs: int = 2000, seed: int = 0,
                steps_per_epoch: int = 5, divergence: float = 1e6) -> ToyResult:
    """Run every method from one initialization and the per-task references."""
    if not methods:
        raise ContractError("need at least one method")
    data = ToyData(steps_per_epoch)
    independent = [train_independent(k, epochs, steps_per_epoch) for k in range(2)]
    runs = {}
    for method in methods:
        cfg = toy_config(method, epochs, seed)
        traj, pts, losses = [], [], []

        def record(result, rep):
            traj.append(result.model.shared[0].w.ravel().tolist())
            pts.append([_effective_point(result, k).tolist() for k in range(2)])
            losses.append(list(rep.train_loss))
            if max(rep.train_loss) > divergence:
                raise OverflowError(method)

        try:
            run_method(cfg, data, ToyModel(), on_epoch=record)
            runs[method] = ToyRun(method, traj, pts, losses, losses[-1] if losses else [])
        except (OverflowError, FloatingPointError, ArithmeticError):
            runs[method] = ToyRun(method, traj, pts, losses, [float("inf")] * 2, diverged=True)
    optima = [ind.final_losses[0] for ind in independent]
    return ToyResult(runs, optima, TOY_MINIMIZERS.tolist(), independent)
