"""Leave-one-out importance ground truth and rank correlation."""

import numpy as np
import pytest

import _oracles as O
from filtertailor import model as M
from filtertailor.errors import ContractError, ShapeError
from filtertailor.oracle import loo_importance, rank_correlation
from filtertailor.synthetic import pattern_dataset
from filtertailor.tensor import Tensor


def _loo_ref(model, ds):
    """Independent float64 recomputation of the leave-one-out sweep."""
    layers = O.extract_layers(model)
    x = ds.images.data.astype(np.float64)
    counts = model.conv_filter_counts()
    base = O.model_loss_ref(layers, x, ds.labels)
    out = []
    for li in sorted(counts):
        for fi in range(counts[li]):
            factors = {i: np.ones(n) for i, n in counts.items()}
            factors[li][fi] = 0.0
            out.append(O.model_loss_ref(layers, x, ds.labels, factors=factors) - base)
    return np.asarray(out)


def test_loo_matches_independent_reference(toy_model):
    model = toy_model(classes=2, seed=30)
    ds = pattern_dataset(24, seed=31, task="frequency", size=8)
    got = loo_importance(model, ds)
    assert got.dtype == np.float64
    assert got.shape == (8,)
    assert np.abs(got - _loo_ref(model, ds)).max() < 1e-5


def test_loo_batch_size_does_not_change_values(toy_model):
    model = toy_model(classes=2, seed=32)
    ds = pattern_dataset(10, seed=33, task="frequency", size=8)
    a = loo_importance(model, ds, batch_size=64)
    b = loo_importance(model, ds, batch_size=3)
    assert np.abs(a - b).max() < 1e-6


def test_loo_dead_filter_scores_exactly_zero(toy_model):
    model = toy_model(classes=2, seed=34)
    # filter (3, 2) emits a constant zero; ablating it is a no-op
    model.layers[3].weight.data[2] = 0.0
    model.layers[3].bias.data[2] = 0.0
    ds = pattern_dataset(12, seed=35, task="frequency", size=8)
    entries = loo_importance(model, ds)
    assert entries[4 + 2] == 0.0
    assert np.count_nonzero(entries) >= 6


def test_loo_duplicate_filters_score_alike(toy_model):
    model = toy_model(classes=2, seed=36)
    # filters (0,0) and (0,1) identical, and the consumer reads both channels
    # with the same weights, so the two ablations are the same function
    model.layers[0].weight.data[1] = model.layers[0].weight.data[0]
    model.layers[0].bias.data[1] = model.layers[0].bias.data[0]
    model.layers[3].weight.data[:, 1] = model.layers[3].weight.data[:, 0]
    ds = pattern_dataset(16, seed=37, task="frequency", size=8)
    entries = loo_importance(model, ds)
    assert abs(entries[0] - entries[1]) < 1e-6
    assert abs(entries[0]) > 1e-9  # the pair is live, not trivially zero


def test_loo_guard_names_the_count():
    spec = M.LayerSpec(M.CONV, out_filters=600, kernel=1)
    layer = M.Layer(spec, Tensor(np.zeros((600, 1, 1, 1), dtype=np.float32)),
                    Tensor(np.zeros(600, dtype=np.float32)))
    head = M.Layer(M.LayerSpec(M.LINEAR, out_features=2),
                   Tensor(np.zeros((2, 600), dtype=np.float32)),
                   Tensor(np.zeros(2, dtype=np.float32)))
    big = M.ModelGraph([layer, M.Layer(M.LayerSpec(M.GAP)), head], 2, (1, 4, 4))
    ds = pattern_dataset(4, seed=0, task="frequency", size=8)
    with pytest.raises(ContractError, match="600"):
        loo_importance(big, ds)


# ---------------------------------------------------------------------------
# rank correlation


def test_rank_correlation_identical_and_reversed():
    v = np.asarray([0.3, 1.2, -0.5, 2.0, 0.0])
    assert rank_correlation(v, v) == 1.0
    assert rank_correlation(v, -v) == -1.0
    assert rank_correlation(v, 3.0 * v + 7.0) == 1.0


def test_rank_correlation_hand_tie_case():
    a = [10.0, 20.0, 20.0, 30.0, 40.0]
    b = [1.0, 5.0, 2.0, 4.0, 3.0]
    assert abs(rank_correlation(a, b) - 4.5 / np.sqrt(95.0)) < 1e-12


def test_rank_correlation_matches_reference_on_random_draws():
    rng = np.random.default_rng(38)
    for _ in range(20):
        n = int(rng.integers(2, 30))
        a = rng.normal(size=n)
        b = rng.normal(size=n)
        if rng.uniform() < 0.5:  # inject ties
            a = np.round(a)
            b = np.round(b)
        assert abs(rank_correlation(a, b) - O.spearman_ref(a, b)) < 1e-12


def test_rank_correlation_degenerate_input_returns_zero():
    assert rank_correlation([1.0, 1.0, 1.0], [0.1, 0.2, 0.3]) == 0.0


def test_rank_correlation_contracts():
    with pytest.raises(ShapeError):
        rank_correlation([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ShapeError):
        rank_correlation([1.0], [2.0])
    with pytest.raises(ShapeError):
        rank_correlation(np.ones((2, 2)), np.ones((2, 2)))
