"""DVERGE ensemble training, attacks and evaluation (single precision)."""

from ._core import (
    Activation,
    Architecture,
    AttackSpec,
    Dataset,
    DistillSpec,
    Ensemble,
    LossKind,
    TrainMode,
    TrainPlan,
    __version__,
    blackbox_eval,
    clean_accuracy,
    distill,
    gen_synthetic,
    load_idx,
    pairwise_diversity,
    pgd_attack,
    train,
    transfer_matrix,
    whitebox_eval,
    write_idx,
)

__all__ = [
    "Activation",
    "Architecture",
    "AttackSpec",
    "Dataset",
    "DistillSpec",
    "Ensemble",
    "LossKind",
    "TrainMode",
    "TrainPlan",
    "__version__",
    "blackbox_eval",
    "clean_accuracy",
    "distill",
    "gen_synthetic",
    "load_idx",
    "pairwise_diversity",
    "pgd_attack",
    "train",
    "transfer_matrix",
    "whitebox_eval",
    "write_idx",
]
