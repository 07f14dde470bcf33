"""Budgeted cascaded inference with trained stopping policies.

A cascade of classifiers of increasing cost is walked front to back; a
small policy module after each stage decides whether to stop and predict
or to pay for the next, larger classifier. Policies (and optionally the
classifiers) are trained with a score-function gradient against a reward
that trades prediction loss against accumulated compute.
"""

from ._kernels import BACKEND_NAME
from .cascade import (
    Cascade,
    EvalReport,
    RewardSpec,
    Rollout,
    build_cascade,
    compute_reward,
    evaluate,
    observe,
    run_rollout,
    selection_distribution,
    stop_probability,
)
from .data import CsvSchema, Dataset, TierSpec, generate_tiered, load_csv, load_idx
from .nn import (
    DenseLayer,
    FeedForwardNet,
    build_net,
    cross_entropy,
    dense_forward,
    flops_of,
    net_backward,
    net_forward,
    sgd_momentum_step,
    softmax,
)
from .training import (
    GradEstimate,
    TrainConfig,
    calibrate_alpha,
    minibatch_baseline,
    pretrain_classifiers,
    sample_gradient,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND_NAME",
    "Cascade",
    "CsvSchema",
    "Dataset",
    "DenseLayer",
    "EvalReport",
    "FeedForwardNet",
    "GradEstimate",
    "RewardSpec",
    "Rollout",
    "TierSpec",
    "TrainConfig",
    "build_cascade",
    "build_net",
    "calibrate_alpha",
    "compute_reward",
    "cross_entropy",
    "dense_forward",
    "evaluate",
    "flops_of",
    "generate_tiered",
    "load_csv",
    "load_idx",
    "minibatch_baseline",
    "net_backward",
    "net_forward",
    "observe",
    "pretrain_classifiers",
    "run_rollout",
    "sample_gradient",
    "selection_distribution",
    "sgd_momentum_step",
    "softmax",
    "stop_probability",
    "train",
]
