"""Target-aware pruning pipeline.

The search loop alternates four stages on a head-replaced pre-trained
model: train per-filter scaling factors on target data with the weights
frozen, turn the accumulated factor gradients into importance scores,
prune the globally least important filters to a per-iteration FLOPs
budget, and fine-tune the survivors with the importance frozen in
place. The loop stops when validation accuracy falls more than tau
points below the best sub-model so far, and returns that best sub-model
with its importance folded into the weights.

The same engine also drives the baseline pruners, which differ only in
how they score filters and whether fine-tuning is importance-scaled.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, batch_iterator
from .errors import BudgetError, ConfigError, ContractError, GraphError
from .model import (
    CONV,
    LINEAR,
    FilterId,
    ImportanceVector,
    ModelGraph,
    ScalingFactors,
    _check_factor_match,
    flops,
    fold_importance,
    forward,
    replace_head,
    save_model,
    set_trainable,
    validate,
)
from .tensor import SGD, Tensor, backward, no_grad, softmax_cross_entropy

# rng stream salts, one per distinct random decision in a run
_SALT_HEAD_INIT = 11
_SALT_HEAD_TRAIN = 12
_SALT_FACTOR_INIT = 21
_SALT_FACTOR_TRAIN = 22
_SALT_FINETUNE = 31


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng([int(p) for p in parts])


@dataclass(frozen=True)
class TailorConfig:
    """Knobs for the pruning search and its training stages.

    tau is in accuracy percentage points. budget_fraction is the share
    of the search-start FLOPs each iteration must remove.
    """

    tau: float = 0.3
    budget_fraction: float = 0.10
    factor_epochs: int = 3
    finetune_epochs: int = 20
    lr_head: float = 0.005
    lr_conv: float = 0.0005
    lr_factor: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.005
    min_filters_per_layer: int = 1
    batch_size: int = 30
    max_iterations: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.tau < 0:
            raise ConfigError(f"tau must be non-negative, got {self.tau}")
        if not 0.0 < self.budget_fraction < 1.0:
            raise ConfigError(f"budget_fraction must lie in (0,1), got {self.budget_fraction}")
        if self.min_filters_per_layer < 1:
            raise ConfigError(f"min_filters_per_layer must be >= 1, got {self.min_filters_per_layer}")
        for name in ("factor_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")


@dataclass(frozen=True)
class PrunePlan:
    """Filters to remove, in selection order, plus the FLOPs left afterwards."""

    filters: tuple[FilterId, ...]
    predicted_flops: int

    def __post_init__(self):
        if len(set(self.filters)) != len(self.filters):
            raise GraphError("prune plan contains duplicate filters")


@dataclass
class IterationRecord:
    iteration: int
    flops: int
    accuracy: float
    accepted: bool
    checkpoint: str | None = None


@dataclass
class SearchState:
    """Outcome of one pruning search."""

    iteration: int
    best_model: ModelGraph
    best_accuracy: float
    best_flops: int
    history: list[IterationRecord] = field(default_factory=list)
    stop_reason: str = ""


# ---------------------------------------------------------------------------
# evaluation helpers


def eval_loss(model: ModelGraph, ds: Dataset, batch_size: int = 64,
              factors=None) -> float:
    """Per-example mean loss over the set in storage order."""
    total = 0.0
    with no_grad():
        for start in range(0, ds.n, batch_size):
            xb = Tensor(ds.images.data[start:start + batch_size])
            yb = ds.labels[start:start + batch_size]
            loss = softmax_cross_entropy(forward(model, xb, factors), yb)
            total += float(loss.data) * len(yb)
    return total / ds.n


def eval_accuracy(model: ModelGraph, ds: Dataset, batch_size: int = 64,
                  beta: ImportanceVector | None = None) -> float:
    """Top-1 accuracy in percent, deterministic order."""
    correct = 0
    with no_grad():
        for start in range(0, ds.n, batch_size):
            xb = Tensor(ds.images.data[start:start + batch_size])
            yb = ds.labels[start:start + batch_size]
            logits = forward(model, xb, beta)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
    return 100.0 * correct / ds.n


# ---------------------------------------------------------------------------
# factor training and importance


def init_factors(model: ModelGraph, seed) -> ScalingFactors:
    """One factor per conv filter, drawn uniformly from [0.75, 1.25]."""
    rng = np.random.default_rng(seed)
    by_layer = {}
    for i in model.conv_indices():
        n = model.layers[i].weight.data.shape[0]
        by_layer[i] = Tensor(rng.uniform(0.75, 1.25, size=n).astype(np.float32))
    return ScalingFactors(by_layer, trainable=True)


def train_factors(model: ModelGraph, factors: ScalingFactors, target_train: Dataset,
                  cfg: TailorConfig, rng: np.random.Generator | None = None) -> ScalingFactors:
    """Fit the factors to the target data with the model weights frozen.

    Returns whichever of (trained factors, initial factors) has the lower
    full-set loss, so the result never regresses past its starting point.
    Weight decay is not applied to factors: shrinking them toward zero
    would bias the importance scores derived from them.
    """
    for p in model.parameters():
        if p.requires_grad:
            raise ContractError("train_factors requires frozen model weights")
    if not factors.trainable:
        raise ContractError("train_factors requires trainable factors")
    if cfg.factor_epochs == 0:
        return factors
    if rng is None:
        rng = _rng(cfg.seed, _SALT_FACTOR_TRAIN)
    initial = factors.values()
    opt = SGD.single_group(factors.params(), lr=cfg.lr_factor,
                           momentum=cfg.momentum, weight_decay=0.0)
    for _ in range(cfg.factor_epochs):
        for xb, yb in batch_iterator(target_train, cfg.batch_size, rng):
            opt.zero_grad()
            loss = softmax_cross_entropy(forward(model, xb, factors), yb)
            backward(loss)
            opt.step()
    trained_loss = eval_loss(model, target_train, cfg.batch_size, factors)
    initial_factors = ScalingFactors.from_values(initial, trainable=True)
    initial_loss = eval_loss(model, target_train, cfg.batch_size, initial_factors)
    if initial_loss < trained_loss:
        return initial_factors
    return factors


def taylor_importance(model: ModelGraph, factors: ScalingFactors,
                      target_train: Dataset, batch_size: int = 30) -> ImportanceVector:
    """First-order importance: |batch-averaged dL/dfactor| * |factor|.

    Gradients are accumulated over every batch of the target train split
    in storage order, then divided by the batch count.
    """
    if not factors.trainable:
        raise ContractError("taylor_importance needs gradient-enabled factors")
    for t in factors.params():
        t.zero_grad()
    n_batches = 0
    for start in range(0, target_train.n, batch_size):
        xb = Tensor(target_train.images.data[start:start + batch_size])
        yb = target_train.labels[start:start + batch_size]
        loss = softmax_cross_entropy(forward(model, xb, factors), yb)
        backward(loss)
        n_batches += 1
    by_layer = {}
    for i, t in factors.by_layer.items():
        grad = t.grad / np.float32(n_batches)
        by_layer[i] = np.abs(grad) * np.abs(t.data)
        t.zero_grad()
    return ImportanceVector(by_layer)


# ---------------------------------------------------------------------------
# pruning


def build_prune_plan(model: ModelGraph, beta: ImportanceVector, cfg: TailorConfig,
                     budget_flops: float | None = None) -> PrunePlan:
    """Select filters globally by ascending importance until the FLOPs budget is met.

    Ties break on (layer_index, filter_index). Filters whose removal
    would leave a layer below the min-filters guard are skipped.
    budget_flops defaults to budget_fraction of this model's FLOPs; the
    search loop passes the fixed search-start budget instead.
    """
    _check_factor_match(model, beta.by_layer)
    base = flops(model)
    budget = float(budget_flops) if budget_flops is not None else cfg.budget_fraction * base
    candidates = sorted(
        (float(beta.by_layer[i][j]), i, j)
        for i in sorted(beta.by_layer)
        for j in range(len(beta.by_layer[i]))
    )
    counts = model.conv_filter_counts()
    chosen: list[FilterId] = []
    predicted = base
    for _, i, j in candidates:
        if counts[i] <= cfg.min_filters_per_layer:
            continue
        counts[i] -= 1
        predicted = flops(model, conv_counts=counts)
        chosen.append(FilterId(i, j))
        if base - predicted >= budget:
            return PrunePlan(tuple(chosen), predicted)
    raise BudgetError(
        f"budget of {budget:.0f} FLOPs is unreachable: the guard of "
        f"{cfg.min_filters_per_layer} filter(s) per layer caps the reduction at "
        f"{base - predicted} of {base} FLOPs"
    )


def apply_prune(model: ModelGraph, beta: ImportanceVector,
                plan: PrunePlan) -> tuple[ModelGraph, ImportanceVector]:
    """Structurally remove the planned filters.

    The pruned conv layer loses output rows and bias entries; the next
    parameterized layer loses the matching input channels or columns.
    Importance entries for removed filters are dropped.
    """
    _check_factor_match(model, beta.by_layer)
    counts = model.conv_filter_counts()
    removals: dict[int, set[int]] = {}
    for fid in plan.filters:
        if fid.layer_index not in counts:
            raise GraphError(f"{fid} does not name a conv layer")
        if not 0 <= fid.filter_index < counts[fid.layer_index]:
            raise GraphError(f"{fid} is out of bounds for layer size {counts[fid.layer_index]}")
        removals.setdefault(fid.layer_index, set()).add(fid.filter_index)
    out = model.copy()
    for layer_index in sorted(removals):
        gone = removals[layer_index]
        n = counts[layer_index]
        if len(gone) >= n:
            raise GraphError(f"plan removes all {n} filters of layer {layer_index}")
        keep = np.asarray([j for j in range(n) if j not in gone], dtype=np.intp)
        layer = out.layers[layer_index]
        layer.weight = Tensor(layer.weight.data[keep].copy(), layer.weight.requires_grad)
        layer.bias = Tensor(layer.bias.data[keep].copy(), layer.bias.requires_grad)
        out.layers[layer_index] = dataclasses.replace(
            layer, spec=dataclasses.replace(layer.spec, out_filters=len(keep)))
        _slice_consumer(out, layer_index, keep)
    new_beta = {}
    for i, vec in beta.by_layer.items():
        gone = removals.get(i, set())
        new_beta[i] = np.asarray([vec[j] for j in range(len(vec)) if j not in gone],
                                 dtype=np.float32)
    validate(out)
    return out, ImportanceVector(new_beta)


def _slice_consumer(model: ModelGraph, conv_index: int, keep: np.ndarray) -> None:
    """Drop the input channels of whichever layer consumes conv_index's output."""
    for nxt in model.layers[conv_index + 1:]:
        if nxt.spec.kind == CONV:
            nxt.weight = Tensor(nxt.weight.data[:, keep].copy(), nxt.weight.requires_grad)
            return
        if nxt.spec.kind == LINEAR:
            # global average pooling preserves channel identity, so linear
            # input columns map one-to-one onto the conv's filters
            nxt.weight = Tensor(nxt.weight.data[:, keep].copy(), nxt.weight.requires_grad)
            return
    raise GraphError(f"conv layer {conv_index} has no downstream consumer")


# ---------------------------------------------------------------------------
# fine-tuning


def _finetune(model: ModelGraph, beta: ImportanceVector | None, target_train: Dataset,
              cfg: TailorConfig, rng: np.random.Generator | None) -> ModelGraph:
    """Train all weights of a copy, conv layers at lr_conv and the head at lr_head."""
    if cfg.finetune_epochs == 0:
        return model.copy()
    if rng is None:
        rng = _rng(cfg.seed, _SALT_FINETUNE)
    out = model.copy()
    set_trainable(out, True)
    opt = SGD([
        {"params": out.conv_parameters(), "lr": cfg.lr_conv},
        {"params": out.head_parameters(), "lr": cfg.lr_head},
    ], momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    for _ in range(cfg.finetune_epochs):
        for xb, yb in batch_iterator(target_train, cfg.batch_size, rng):
            opt.zero_grad()
            loss = softmax_cross_entropy(forward(out, xb, beta), yb)
            backward(loss)
            opt.step()
    return out


def scale_normalized(beta: ImportanceVector) -> ImportanceVector:
    """Rescale each layer's importance to mean one, for use as channel scales.

    Raw importance values sit orders of magnitude below one, and stacking
    them as per-layer output scales shrinks activations geometrically until
    fine-tuning stalls. Relu and max pooling are positively homogeneous, so
    dividing a layer's scales by a shared constant changes the network
    function only by an overall factor the head absorbs; the within-layer
    proportions, which carry the importance signal, are untouched. Layers
    whose importance is identically zero are left alone.
    """
    scaled = {}
    for i, v in beta.by_layer.items():
        m = float(v.mean())
        scaled[i] = v / np.float32(m) if m > 0 else v.copy()
    return ImportanceVector(scaled)


def importance_finetune(model: ModelGraph, beta: ImportanceVector, target_train: Dataset,
                        cfg: TailorConfig, rng: np.random.Generator | None = None) -> ModelGraph:
    """Fine-tune weights under the frozen importance scaling."""
    if not isinstance(beta, ImportanceVector):
        raise ContractError(
            "importance_finetune requires a frozen ImportanceVector, "
            f"got {type(beta).__name__}"
        )
    return _finetune(model, beta, target_train, cfg, rng)


def fit_target_head(pretrained: ModelGraph, target_train: Dataset,
                    cfg: TailorConfig) -> ModelGraph:
    """Replace the head for the target classes and train only the head."""
    model = replace_head(pretrained, target_train.class_count, seed=(cfg.seed, _SALT_HEAD_INIT))
    set_trainable(model, False)
    for p in model.head_parameters():
        p.requires_grad = True
    if cfg.finetune_epochs == 0:
        return model
    rng = _rng(cfg.seed, _SALT_HEAD_TRAIN)
    opt = SGD.single_group(model.head_parameters(), lr=cfg.lr_head,
                           momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    for _ in range(cfg.finetune_epochs):
        for xb, yb in batch_iterator(target_train, cfg.batch_size, rng):
            opt.zero_grad()
            loss = softmax_cross_entropy(forward(model, xb), yb)
            backward(loss)
            opt.step()
    return model


# ---------------------------------------------------------------------------
# search engine


class TaylorScorer:
    """Score filters by training fresh factors on the given data each iteration."""

    def __init__(self, data: Dataset):
        self.data = data

    def score(self, model: ModelGraph, cfg: TailorConfig, iteration: int) -> ImportanceVector:
        frozen = model.copy()
        set_trainable(frozen, False)
        alpha = init_factors(frozen, seed=(cfg.seed, _SALT_FACTOR_INIT, iteration))
        alpha = train_factors(frozen, alpha, self.data, cfg,
                              rng=_rng(cfg.seed, _SALT_FACTOR_TRAIN, iteration))
        return taylor_importance(frozen, alpha, self.data, batch_size=cfg.batch_size)

    def on_prune(self, model: ModelGraph, plan: PrunePlan) -> None:
        pass


def run_prune_search(pretrained: ModelGraph, target: tuple[Dataset, Dataset],
                     cfg: TailorConfig, scorer, beta_finetune: bool,
                     checkpoint_dir=None, on_record=None) -> tuple[ModelGraph, SearchState]:
    """Iterative prune/fine-tune loop shared by the target-aware pipeline and baselines.

    Stops when the candidate's validation accuracy falls more than tau
    points below the best so far, when the per-layer filter guard blocks
    the budget, or when max_iterations is reached. Every candidate is
    recorded, including a rejected final one.
    """
    train, val = target
    model = fit_target_head(pretrained, train, cfg)
    base_flops = flops(model)
    best_acc = eval_accuracy(model, val, cfg.batch_size)
    best = model
    best_flops = base_flops
    budget = cfg.budget_fraction * base_flops
    history: list[IterationRecord] = []

    def emit(record: IterationRecord, checkpoint_model: ModelGraph) -> None:
        if checkpoint_dir is not None:
            fname = f"iter_{record.iteration:03d}.ftm"
            save_model(checkpoint_model, os.path.join(checkpoint_dir, fname))
            record.checkpoint = f"{os.path.basename(os.path.normpath(str(checkpoint_dir)))}/{fname}"
        history.append(record)
        if on_record is not None:
            on_record(record)

    emit(IterationRecord(0, base_flops, best_acc, accepted=True), best)

    stop_reason = "max_iterations"
    c = 0
    while cfg.max_iterations is None or c < cfg.max_iterations:
        c += 1
        scores = scorer.score(best, cfg, c)
        try:
            plan = build_prune_plan(best, scores, cfg, budget_flops=budget)
        except BudgetError:
            stop_reason = "guard"
            break
        scorer.on_prune(best, plan)
        pruned, beta_p = apply_prune(best, scores, plan)
        if beta_finetune:
            # raw importance is used for ranking only; as channel scales it
            # is renormalized so survivor activations stay trainable
            beta_s = scale_normalized(beta_p)
            candidate = importance_finetune(pruned, beta_s, train, cfg,
                                            rng=_rng(cfg.seed, _SALT_FINETUNE, c))
            acc = eval_accuracy(candidate, val, cfg.batch_size, beta=beta_s)
            deployable = fold_importance(candidate, beta_s)
        else:
            candidate = _finetune(pruned, None, train, cfg,
                                  rng=_rng(cfg.seed, _SALT_FINETUNE, c))
            acc = eval_accuracy(candidate, val, cfg.batch_size)
            deployable = candidate
        cand_flops = flops(candidate)
        accepted = not (best_acc - acc > cfg.tau)
        emit(IterationRecord(c, cand_flops, acc, accepted), deployable)
        if not accepted:
            stop_reason = "tau"
            break
        best, best_acc, best_flops = deployable, acc, cand_flops

    state = SearchState(
        iteration=len(history) - 1,
        best_model=best,
        best_accuracy=best_acc,
        best_flops=best_flops,
        history=history,
        stop_reason=stop_reason,
    )
    return best, state


def search_optimal(pretrained: ModelGraph, source_meta, target: tuple[Dataset, Dataset],
                   cfg: TailorConfig, checkpoint_dir=None,
                   on_record=None) -> tuple[ModelGraph, SearchState]:
    """Full target-aware pipeline: head replacement, then the prune/fine-tune loop.

    source_meta optionally carries {"class_count": ...} for a sanity
    check against the loaded checkpoint. The returned model is the best
    sub-model with importance already folded into its weights.
    """
    if source_meta and "class_count" in source_meta:
        if int(source_meta["class_count"]) != pretrained.class_count:
            raise ConfigError(
                f"checkpoint has {pretrained.class_count} classes but source "
                f"metadata declares {source_meta['class_count']}"
            )
    train, _ = target
    return run_prune_search(pretrained, target, cfg, TaylorScorer(train),
                            beta_finetune=True, checkpoint_dir=checkpoint_dir,
                            on_record=on_record)
