"""Gradient de-conflict for multi-output networks by learned task-preferred
routes (disentanglement-and-fusion training), with baselines and diagnostics."""

from .config import DatasetSpec, ModelSpec, RunConfig, load_config
from .model import (
    ImportanceSet,
    MultiOutputModel,
    forward_task,
    importance_decay_loss,
    init_importances,
    lateral_normalize,
    multi_exit_mlp,
    multi_task_mlp,
    plain_forward,
)
from .numcore import ContractError, Graph, NumericError, Rng, filter_normalize, finite_diff, grad
from .metagf import ablation_variant, fuse_gradients, meta_step, run_drmgf, run_method
from .trainers import average_fuse, disentangle_epoch, joint_sgd_step, pcgrad_fuse
from .diagnostics import (
    DegradationMatrix,
    conflict_gain_study,
    conflict_value,
    convergence_gain,
    delta_m,
    prune_and_measure,
    similarity_matrix,
)
from .bench import RunRecord, diagnose, emit_report, epochs_to_threshold, run_experiment
from .toy import toy_problem

__version__ = "0.1.0"
