import numpy as np
import pytest

from drmgf.config import DatasetSpec, RunConfig
from drmgf.data import gen_synthetic
from drmgf.model import LayerWeights, MultiOutputModel, multi_exit_mlp
from drmgf.numcore import Rng


def small_config(**kw) -> RunConfig:
    """A fast multi-exit benchmark: 3 exits, width 16, 256 samples."""
    data = DatasetSpec(size=256, dim=8, classes=4, tasks=3)
    base = dict(max_iter=2, batch_size=32, data=data)
    base.update(kw)
    model = base.pop("model", None)
    cfg = RunConfig(**base)
    cfg.model.width, cfg.model.depth = 16, 3
    if model is not None:
        cfg.model = model
    return cfg.validate()


@pytest.fixture
def small_data():
    return gen_synthetic(DatasetSpec(size=256, dim=8, classes=4, tasks=3), seed=0)


@pytest.fixture
def small_model():
    return multi_exit_mlp(Rng(3), 8, 4, width=16, depth=3)


def single_task_model(rng: Rng, in_dim=4, hidden=5, classes=3) -> MultiOutputModel:
    """K=1: one shared layer and one linear head."""
    w = rng.normal((hidden, in_dim, 1, 1), scale=0.5)
    h = rng.normal((classes, hidden, 1, 1), scale=0.5)
    return MultiOutputModel([LayerWeights(w, np.zeros(hidden))], [[LayerWeights(h, np.zeros(classes))]], [1])
