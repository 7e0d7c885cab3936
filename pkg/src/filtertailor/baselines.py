"""Comparison pipelines sharing the target-aware search machinery.

ft_head and ft_full are the no-pruning references. The two pruning
baselines reuse the exact budget/stop loop but score filters
differently: l1_prune_pipeline ranks by per-filter weight norm (blind
to any data), and source_taylor_prune_pipeline runs the factor/Taylor
scoring on SOURCE data through the preserved source head, modeling
pruners that protect the original task instead of the target one.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .errors import GraphError
from .model import (
    ImportanceVector,
    Layer,
    LayerSpec,
    LINEAR,
    ModelGraph,
    set_trainable,
    validate,
)
from .tailor import (
    PrunePlan,
    SearchState,
    TailorConfig,
    _finetune,
    _rng,
    _SALT_FACTOR_INIT,
    _SALT_FACTOR_TRAIN,
    _SALT_FINETUNE,
    fit_target_head,
    init_factors,
    run_prune_search,
    taylor_importance,
    train_factors,
)
from .tensor import Tensor


def ft_head(pretrained: ModelGraph, target: tuple[Dataset, Dataset],
            cfg: TailorConfig) -> ModelGraph:
    """Replace the head and train only the head; conv weights untouched."""
    train, _ = target
    return fit_target_head(pretrained, train, cfg)


def ft_full(pretrained: ModelGraph, target: tuple[Dataset, Dataset],
            cfg: TailorConfig) -> ModelGraph:
    """Replace the head and fine-tune every parameter with two-tier rates."""
    train, _ = target
    model = fit_target_head(pretrained, train, cfg)
    return _finetune(model, None, train, cfg, rng=_rng(cfg.seed, _SALT_FINETUNE, 0))


class L1Scorer:
    """Rank filters by the l1 norm of their weights; ignores data entirely."""

    def score(self, model: ModelGraph, cfg: TailorConfig, iteration: int) -> ImportanceVector:
        by_layer = {}
        for i in model.conv_indices():
            w = model.layers[i].weight.data
            by_layer[i] = np.abs(w).sum(axis=(1, 2, 3)).astype(np.float32)
        return ImportanceVector(by_layer)

    def on_prune(self, model: ModelGraph, plan: PrunePlan) -> None:
        pass


def l1_prune_pipeline(pretrained: ModelGraph, target: tuple[Dataset, Dataset],
                      cfg: TailorConfig, checkpoint_dir=None,
                      on_record=None) -> tuple[ModelGraph, SearchState]:
    """Weight-norm pruning with plain fine-tuning, same loop as the main pipeline."""
    return run_prune_search(pretrained, target, cfg, L1Scorer(),
                            beta_finetune=False, checkpoint_dir=checkpoint_dir,
                            on_record=on_record)


class SourceTaylorScorer:
    """Factor/Taylor scoring on source data through the kept source head.

    The source head's input columns track prunes of the last conv layer
    so the scoring model stays well-formed across iterations.
    """

    def __init__(self, source_data: Dataset, pretrained: ModelGraph):
        head = pretrained.layers[pretrained.head_index()]
        if head.spec.kind != LINEAR:
            raise GraphError("pretrained model must end with a linear head")
        if pretrained.class_count != source_data.class_count:
            raise GraphError(
                f"source data has {source_data.class_count} classes but the "
                f"pretrained head emits {pretrained.class_count}"
            )
        self.source_data = source_data
        self.head_weight = head.weight.data.copy()
        self.head_bias = head.bias.data.copy()
        self.source_classes = pretrained.class_count

    def _scoring_model(self, model: ModelGraph) -> ModelGraph:
        scoring = model.copy()
        spec = LayerSpec(LINEAR, out_features=self.source_classes)
        scoring.layers[scoring.head_index()] = Layer(
            spec, Tensor(self.head_weight.copy()), Tensor(self.head_bias.copy()))
        scoring.class_count = self.source_classes
        validate(scoring)
        return scoring

    def score(self, model: ModelGraph, cfg: TailorConfig, iteration: int) -> ImportanceVector:
        frozen = self._scoring_model(model)
        set_trainable(frozen, False)
        alpha = init_factors(frozen, seed=(cfg.seed, _SALT_FACTOR_INIT, iteration))
        alpha = train_factors(frozen, alpha, self.source_data, cfg,
                              rng=_rng(cfg.seed, _SALT_FACTOR_TRAIN, iteration))
        return taylor_importance(frozen, alpha, self.source_data,
                                 batch_size=cfg.batch_size)

    def on_prune(self, model: ModelGraph, plan: PrunePlan) -> None:
        last_conv = max(model.conv_indices())
        gone = {f.filter_index for f in plan.filters if f.layer_index == last_conv}
        if not gone:
            return
        n = model.layers[last_conv].weight.data.shape[0]
        keep = [j for j in range(n) if j not in gone]
        self.head_weight = self.head_weight[:, keep].copy()


def source_taylor_prune_pipeline(pretrained: ModelGraph, source_val: Dataset,
                                 target: tuple[Dataset, Dataset], cfg: TailorConfig,
                                 checkpoint_dir=None,
                                 on_record=None) -> tuple[ModelGraph, SearchState]:
    """Target-blind variant: importance comes from source data, fine-tuning from target."""
    scorer = SourceTaylorScorer(source_val, pretrained)
    return run_prune_search(pretrained, target, cfg, scorer,
                            beta_finetune=True, checkpoint_dir=checkpoint_dir,
                            on_record=on_record)
