"""Brute-force filter importance ground truth.

loo_importance ablates one filter at a time (its channel factor set to
zero) and measures the exact change in full-dataset loss. The sign is
kept: a negative entry means removing that filter helps the task.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .errors import ContractError, ShapeError
from .model import ImportanceVector, ModelGraph, forward
from .tensor import Tensor, no_grad, softmax_cross_entropy

_FILTER_GUARD = 512


def _dataset_loss(model: ModelGraph, ds: Dataset,
                  mask: ImportanceVector | None, batch_size: int) -> float:
    """Per-example mean loss over the whole set, fixed order, no sampling."""
    total = 0.0
    with no_grad():
        for start in range(0, ds.n, batch_size):
            xb = Tensor(ds.images.data[start:start + batch_size])
            yb = ds.labels[start:start + batch_size]
            loss = softmax_cross_entropy(forward(model, xb, mask), yb)
            total += float(loss.data) * len(yb)
    return total / ds.n


def loo_importance(model: ModelGraph, data: Dataset, batch_size: int = 64) -> np.ndarray:
    """Exact leave-one-out loss increase per filter, ordered by (layer, filter).

    Entry value = L(data; filter ablated) - L(data; intact model). Kept
    signed; computing it needs one full forward sweep per filter, so a
    guard rejects models with more than 512 filters.
    """
    counts = model.conv_filter_counts()
    total_filters = sum(counts.values())
    if total_filters > _FILTER_GUARD:
        raise ContractError(
            f"model has {total_filters} filters; leave-one-out guard is {_FILTER_GUARD}"
        )
    base = _dataset_loss(model, data, None, batch_size)
    out = []
    for layer_index in sorted(counts):
        for filter_index in range(counts[layer_index]):
            ones = {i: np.ones(n, dtype=np.float32) for i, n in counts.items()}
            ones[layer_index][filter_index] = 0.0
            ablated = _dataset_loss(model, data, ImportanceVector(ones), batch_size)
            out.append(ablated - base)
    return np.asarray(out, dtype=np.float64)


def _average_ranks(v: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing the average of their positions."""
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def rank_correlation(a, b) -> float:
    """Spearman correlation with average-rank tie handling."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"rank_correlation needs equal-length vectors, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise ShapeError("rank_correlation needs at least 2 entries")
    ra = _average_ranks(a)
    rb = _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0.0:
        return 0.0
    return float((ra * rb).sum() / denom)
