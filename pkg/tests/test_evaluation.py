import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ibmea.evaluation import (
    RankingResult,
    compute_metrics,
    cosine_scores,
    metrics_from_ranks,
    rank_alignments,
    ranks_from_scores,
)


def brute_force_rank(row, gold, ids):
    order = sorted(range(len(row)), key=lambda j: (-row[j], ids[j]))
    return order.index(gold) + 1


def test_tie_broken_by_lower_id():
    scores = np.array([[0.5, 0.9, 0.9]])
    assert ranks_from_scores(scores, [2], [0, 1, 2]).tolist() == [2]
    assert ranks_from_scores(scores, [1], [0, 1, 2]).tolist() == [1]


def test_rank_matches_sorting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        scores = rng.integers(0, 4, size=(30, 25)).astype(float)  # many ties
        ids = rng.permutation(100)[:25]
        gold = rng.integers(0, 25, 30)
        ours = ranks_from_scores(scores, gold, ids)
        ref = [brute_force_rank(scores[i], gold[i], ids) for i in range(30)]
        assert ours.tolist() == ref


def test_metric_hand_values():
    h1, h10, mrr = metrics_from_ranks([1, 3])
    assert (h1, h10) == (0.5, 1.0)
    assert mrr == pytest.approx(2 / 3)
    h1, h10, mrr = metrics_from_ranks([11])
    assert h10 == 0.0 and mrr == pytest.approx(1 / 11)
    assert metrics_from_ranks([10])[1] == 1.0


def test_identity_embeddings_are_perfect():
    z = np.eye(6)
    pairs = np.stack([np.arange(6), np.arange(6)], 1)
    for cand in ("test", "all"):
        m = compute_metrics(rank_alignments(z, z, pairs, cand))
        assert (m.h1, m.h10, m.mrr, m.n_pairs) == (1.0, 1.0, 1.0, 6)


def test_both_direction_is_average():
    rng = np.random.default_rng(1)
    z1, z2 = rng.normal(size=(12, 3)), rng.normal(size=(15, 3))
    pairs = np.stack([rng.permutation(12)[:8], rng.permutation(15)[:8]], 1)
    r = rank_alignments(z1, z2, pairs, "all")
    a, b, both = (compute_metrics(r, d) for d in ("1to2", "2to1", "both"))
    for key in ("h1", "h10", "mrr"):
        assert getattr(both, key) == pytest.approx((getattr(a, key) + getattr(b, key)) / 2)
    assert r.n_candidates_12 == 15 and r.n_candidates_21 == 12


def test_test_candidates_restrict_ranking():
    # entity 3 of kg2 is closer than gold but is not a test entity
    z1 = np.array([[1.0, 0.0], [0.0, 1.0]])
    z2 = np.array([[0.9, 0.1], [0.1, 0.9], [0.0, 0.0], [1.0, 0.0]])
    pairs = [[0, 0], [1, 1]]
    assert rank_alignments(z1, z2, pairs, "test").ranks_12.tolist() == [1, 1]
    assert rank_alignments(z1, z2, pairs, "all").ranks_12.tolist() == [2, 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["exp", "cube", "affine"]))
def test_ranks_invariant_under_monotone_transform(seed, kind):
    rng = np.random.default_rng(seed)
    scores = rng.uniform(-1, 1, (8, 9))
    f = {"exp": np.exp, "cube": lambda x: x**3, "affine": lambda x: 3 * x + 7}[kind]
    gold = rng.integers(0, 9, 8)
    ids = np.arange(9)
    assert np.array_equal(ranks_from_scores(scores, gold, ids), ranks_from_scores(f(scores), gold, ids))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=30))
def test_metric_identities(ranks):
    h1, h10, mrr = metrics_from_ranks(ranks)
    assert 0 <= h1 <= h10 <= 1
    assert h1 <= mrr <= 1


def test_empty_pairs_report():
    r = RankingResult(np.zeros((0, 2), np.int64), np.zeros(0), np.zeros(0), 0, 0)
    m = compute_metrics(r, metadata={"bucket": "x"})
    assert m.n_pairs == 0 and m.h1 is None and m.metadata == {"bucket": "x"}


def test_zero_norm_rows_warn(caplog):
    z1 = np.array([[0.0, 0.0], [1.0, 0.0]])
    with caplog.at_level(logging.WARNING, logger="ibmea.evaluation"):
        s = cosine_scores(z1, z1)
    assert "zero-norm" in caplog.text
    assert np.all(s[0] == 0) and np.all(np.isfinite(s))
