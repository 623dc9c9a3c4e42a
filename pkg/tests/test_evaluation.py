import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import manual_split
from ipslae.dataset import InteractionMatrix, split_strong_generalization
from ipslae.errors import DataError
from ipslae.evaluation import (coverage_at_k, evaluate, ndcg_at_k, popular_subset_metrics,
                               popularity_bins, recall_at_k, score_users, top_n)
from ipslae.solver import SimilarityModel, apply_item_weights, fit_ease, gram

SWAP = SimilarityModel(np.array([[0.0, 1.0], [1.0, 0.0]]), None, True)


# --- scoring ---------------------------------------------------------------

def test_score_single_row():
    split = manual_split(np.ones((1, 2)), [[0]], [[1]], 2)
    sm = score_users(SWAP, split, "test")
    assert sm.scores[0, 0] == -np.inf and sm.scores[0, 1] == 1.0
    assert sm.foldin_mask.tolist() == [[True, False]]


def test_empty_foldin_user_is_skipped():
    split = manual_split(np.ones((1, 2)), [[0], []], [[1], [1]], 2)
    sm = score_users(SWAP, split, "test")
    assert sm.users.tolist() == [1]
    assert sm.skipped.tolist() == [2]
    assert evaluate(SWAP, split, "test", (1,), (1,), (1,)).n_skipped == 1


def test_scores_match_dense_product(rng):
    dense = rng.random((30, 15)) < 0.4
    split = split_strong_generalization(InteractionMatrix.from_dense(dense), 0.3, 0.3, 0.3, 5)
    b = rng.standard_normal((15, 15))
    np.fill_diagonal(b, 0)
    sm = score_users(SimilarityModel(b, None, True), split, "valid")
    brute = split.foldin["valid"].toarray()[sm.rows] @ b
    finite = np.isfinite(sm.scores)
    np.testing.assert_allclose(sm.scores[finite], brute[finite], atol=1e-12)
    assert np.all(~finite == (split.foldin["valid"].toarray()[sm.rows] > 0))


def test_dimension_mismatch():
    split = manual_split(np.ones((1, 3)), [[0]], [[1]], 3)
    with pytest.raises(DataError):
        score_users(SWAP, split, "test")


# --- top-n -----------------------------------------------------------------

def test_tie_break_by_index():
    assert top_n(np.array([[0.9, 0.9, 0.1]]), 2).items[0].tolist() == [0, 1]


def test_short_rows_return_all_eligible():
    ranked = top_n(np.array([[0.3, -np.inf, 0.5]]), 10)
    assert ranked.items[0].tolist() == [2, 0]


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 30))
def test_top_n_matches_sort_oracle(seed, n):
    rng = np.random.default_rng(seed)
    s = rng.integers(-5, 5, size=(4, 20)).astype(float)  # many ties
    s[rng.random(s.shape) < 0.2] = -np.inf
    ranked = top_n(s, n)
    for r in range(4):
        oracle = sorted((i for i in range(20) if np.isfinite(s[r, i])),
                        key=lambda i: (-s[r, i], i))[:n]
        assert ranked.items[r].tolist() == oracle


# --- metric examples -------------------------------------------------------

def test_recall_examples():
    assert recall_at_k([0], [0], 1) == 1.0
    assert recall_at_k([0, 5], [0, 1, 2], 2) == 0.5
    assert recall_at_k([3, 4], [0, 1], 2) == 0.0


def test_ndcg_examples():
    assert ndcg_at_k([7, 1], [7], 2) == 1.0
    assert ndcg_at_k([1, 7], [7], 2) == pytest.approx(1 / math.log2(3), abs=1e-12)
    assert ndcg_at_k([1, 7], [7], 2) == pytest.approx(0.6309297535714575, abs=1e-12)
    assert ndcg_at_k([1, 2], [7], 2) == 0.0


def test_ndcg_multiple_relevant():
    # hits at ranks 1 and 3 of 3 relevant, k = 3
    dcg = 1 + 1 / math.log2(4)
    idcg = 1 + 1 / math.log2(3) + 1 / math.log2(4)
    assert ndcg_at_k([0, 9, 1], [0, 1, 2], 3) == pytest.approx(dcg / idcg, abs=1e-12)


def test_coverage_examples():
    assert coverage_at_k([[1, 2], [2, 3]], 4, 2) == 0.75
    assert coverage_at_k([[0, 1, 2]] * 5, 10, 3) == 0.3
    assert coverage_at_k([[0, 1], [2, 3]], 4, 2) == 1.0


def test_empty_holdout_rejected():
    with pytest.raises(ValueError):
        recall_at_k([1], [], 1)
    with pytest.raises(ValueError):
        ndcg_at_k([1], [], 1)


# --- popularity bins -------------------------------------------------------

def test_bins_single_popular_item():
    counts = np.arange(20, 0, -1)
    hist = popularity_bins([[0], [0], [0]], counts, n_bins=10, k=1)
    assert hist.tolist() == [3] + [0] * 9


def test_bins_remainder_goes_to_earlier_bins():
    counts = np.arange(7, 0, -1)  # item 0 most popular; bins of sizes 3, 2, 2
    hist = popularity_bins([[0, 1, 2, 3, 4, 5, 6]], counts, n_bins=3, k=7)
    assert hist.tolist() == [3, 2, 2]


def test_bins_uniform_lists_chi_square(rng):
    n_items, k, n_users = 100, 10, 3000
    counts = rng.integers(0, 1000, n_items)
    lists = [rng.choice(n_items, size=k, replace=False) for _ in range(n_users)]
    hist = popularity_bins(lists, counts, n_bins=10, k=k)
    assert hist.sum() == n_users * k
    expected = n_users * k / 10
    chi2 = np.sum((hist - expected) ** 2 / expected)
    assert chi2 < 27.88  # 0.999 quantile, 9 degrees of freedom


# --- popular subset --------------------------------------------------------

def test_popular_subset_full_fraction_equals_plain():
    lists = [[0, 1, 2], [3, 2, 1]]
    holds = [[1, 4], [0, 3]]
    counts = np.array([5, 4, 3, 2, 1])
    rec, ndcg, n = popular_subset_metrics(lists, holds, counts, 1.0, 3)
    assert n == 2
    assert rec == pytest.approx(np.mean([recall_at_k(l, h, 3) for l, h in zip(lists, holds)]))
    assert ndcg == pytest.approx(np.mean([ndcg_at_k(l, h, 3) for l, h in zip(lists, holds)]))


def test_popular_subset_skips_users_without_popular_items():
    counts = np.array([50, 40, 1, 1, 1, 1, 1, 1, 1, 1])
    rec, _, n = popular_subset_metrics([[0, 2], [2, 3]], [[0], [5]], counts, 0.2, 2)
    assert n == 1 and rec == 1.0


def test_popular_subset_favours_popular_first_rankings():
    counts = np.arange(10, 0, -1)
    lists = [[0, 1, 5, 6]]
    holds = [[0, 1, 7, 8]]
    rec_pop, _, _ = popular_subset_metrics(lists, holds, counts, 0.2, 4)
    assert rec_pop >= recall_at_k(lists[0], holds[0], 4)


# --- properties ------------------------------------------------------------

@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    n_items = int(rng.integers(5, 40))
    lists = [rng.permutation(n_items) for _ in range(int(rng.integers(1, 6)))]
    hold = rng.choice(n_items, size=int(rng.integers(1, n_items)), replace=False)
    prev = (0.0, 0.0, 0.0)
    for k in range(1, n_items + 1):
        cur = (recall_at_k(lists[0], hold, k) if k >= len(hold) else -1.0,
               ndcg_at_k(lists[0], hold, k) if k >= len(hold) else -1.0,
               coverage_at_k(lists, n_items, k))
        for a, b in zip(prev, cur):
            if b >= 0:
                assert b >= a - 1e-12
        assert all(0.0 <= v <= 1.0 for v in cur if v >= 0)
        prev = tuple(max(a, b) for a, b in zip(prev, cur))


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_argmax_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 15))
    b = rng.standard_normal((n, n))
    np.fill_diagonal(b, 0)
    model = SimilarityModel(b, None, True)
    x = (rng.random((3, n)) < 0.4).astype(float)
    base = top_n(x @ model.b, n)
    scaled = top_n(x @ apply_item_weights(model, np.full(n, scale)).b, n)
    for a, c in zip(base.items, scaled.items):
        np.testing.assert_array_equal(a, c)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_foldin_items_never_ranked(seed):
    rng = np.random.default_rng(seed)
    dense = rng.random((25, 12)) < 0.4
    split = split_strong_generalization(InteractionMatrix.from_dense(dense), 0.3, 0.3, 0.3, seed)
    model = fit_ease(gram(split.train), 1.0)
    for seg in ("valid", "test"):
        sm = score_users(model, split, seg)
        ranked = top_n(sm, 12)
        foldin = split.foldin[seg]
        for r, items in zip(sm.rows, ranked.items):
            assert not set(items) & set(foldin.indices[foldin.indptr[r]:foldin.indptr[r + 1]])


def test_perfect_model_recall():
    n = 8
    holds = [[2, 3], [5], [0, 6, 7]]
    folds = [[0], [1, 2], [3]]
    split = manual_split(np.ones((2, n)), folds, holds, n)
    # a "model" whose scores put each user's holdout on top
    b = np.zeros((n, n))
    for f, h in zip(folds, holds):
        for i in h:
            b[f[0], i] = 10.0
    model = SimilarityModel(b, None, False)
    rep = evaluate(model, split, "test", (3,), (3,), (3,), popular_frac=None)
    assert rep.recall[3] == 1.0 and rep.ndcg[3] == 1.0


# --- full report -----------------------------------------------------------

def synthetic_split(seed=0):
    rng = np.random.default_rng(seed)
    pop = np.linspace(0.6, 0.02, 40)
    dense = rng.random((200, 40)) < pop
    return split_strong_generalization(InteractionMatrix.from_dense(dense), 0.2, 0.2, 0.2, seed)


def test_report_conservation_and_ranges():
    split = synthetic_split()
    model = fit_ease(gram(split.train), 5.0)
    rep = evaluate(model, split, "test", (5, 10), (10,), (5, 10), n_bins=10)
    assert sum(rep.bins) == rep.n_users * 10
    for table in (rep.recall, rep.ndcg, rep.coverage):
        assert all(0 <= v <= 1 for v in table.values())
    assert rep.coverage[5] <= rep.coverage[10]
    assert set(rep.popular) == {"recall@5", "recall@10", "ndcg@10"}
    assert rep.config["rng"] == "numpy.random.PCG64"


def test_report_is_deterministic(tmp_path):
    split = synthetic_split(1)
    model = fit_ease(gram(split.train), 5.0)
    a = evaluate(model, split, "test", per_user=True)
    b = evaluate(model, split, "test", per_user=True)
    assert a.to_json() == b.to_json()
    paths = a.write(tmp_path, "r")
    assert json.loads(paths["json"].read_text())["n_users"] == a.n_users
    assert paths["bins"].read_text().splitlines()[0] == "bin\tcount"
    assert len(a.per_user) == a.n_users


def test_batching_does_not_change_results():
    split = synthetic_split(2)
    model = fit_ease(gram(split.train), 5.0)
    assert evaluate(model, split, "test", batch_size=3).to_json() == \
        evaluate(model, split, "test").to_json()
