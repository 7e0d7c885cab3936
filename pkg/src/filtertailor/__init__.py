"""Target-aware filter pruning for small CNNs.

Prunes a source-trained convolutional network down to a sub-model fit
for a transfer task: per-filter scaling factors are trained on the
target data, their gradients rank every filter's importance to the
task, the least important filters are removed to a FLOPs budget, and
the survivors are fine-tuned under the frozen importance until pruning
starts to cost validation accuracy.
"""

from .data import Dataset, TargetTaskSpec, load_cifar_binary, load_idx, normalize, sample_target
from .errors import (
    BudgetError,
    ConfigError,
    ContractError,
    DataFormatError,
    GraphError,
    ShapeError,
)
from .model import (
    FilterId,
    ImportanceVector,
    ModelGraph,
    ScalingFactors,
    build_model,
    flops,
    fold_importance,
    forward,
    load_model,
    replace_head,
    save_model,
)
from .oracle import loo_importance, rank_correlation
from .tailor import (
    PrunePlan,
    SearchState,
    TailorConfig,
    apply_prune,
    build_prune_plan,
    importance_finetune,
    init_factors,
    scale_normalized,
    search_optimal,
    taylor_importance,
    train_factors,
)
from .tensor import OptimizerState, Tensor, backward, no_grad, sgd_step

__version__ = "0.1.0"

__all__ = [
    "BudgetError",
    "ConfigError",
    "ContractError",
    "DataFormatError",
    "Dataset",
    "FilterId",
    "GraphError",
    "ImportanceVector",
    "ModelGraph",
    "OptimizerState",
    "PrunePlan",
    "ScalingFactors",
    "SearchState",
    "ShapeError",
    "TailorConfig",
    "TargetTaskSpec",
    "Tensor",
    "apply_prune",
    "backward",
    "build_model",
    "build_prune_plan",
    "flops",
    "fold_importance",
    "forward",
    "importance_finetune",
    "init_factors",
    "load_cifar_binary",
    "load_idx",
    "load_model",
    "loo_importance",
    "no_grad",
    "normalize",
    "rank_correlation",
    "replace_head",
    "sample_target",
    "save_model",
    "scale_normalized",
    "search_optimal",
    "sgd_step",
    "taylor_importance",
    "train_factors",
]
