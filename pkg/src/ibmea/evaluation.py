"""Similarity ranking and Hits@K / MRR metrics."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

logger = logging.getLogger(__name__)

DIRECTIONS = ("1to2", "2to1", "both")


@dataclass
class RankingResult:
    pairs: np.ndarray  # (k, 2)
    ranks_12: np.ndarray  # rank of e2 among kg2 candidates for query e1, 1-based
    ranks_21: np.ndarray  # rank of e1 among kg1 candidates for query e2
    n_candidates_12: int
    n_candidates_21: int

    def ranks(self, direction="both"):
        if direction == "1to2":
            return self.ranks_12
        if direction == "2to1":
            return self.ranks_21
        if direction == "both":
            return np.concatenate([self.ranks_12, self.ranks_21])
        raise ValueError(f"unknown direction {direction!r}")


@dataclass
class MetricsReport:
    h1: float | None
    h10: float | None
    mrr: float | None
    n_pairs: int
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def check(self):
        if self.n_pairs == 0:
            return self
        assert 0.0 <= self.h1 <= self.h10 <= 1.0, self
        assert self.h1 <= self.mrr <= 1.0, self
        return self


def cosine_scores(z1, z2):
    """Cosine similarity matrix; zero-norm rows score 0 against everything."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    n1 = np.linalg.norm(z1, axis=1, keepdims=True)
    n2 = np.linalg.norm(z2, axis=1, keepdims=True)
    if (n1 == 0).any() or (n2 == 0).any():
        logger.warning("zero-norm embedding rows in ranking; their similarities are set to 0")
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(n1 > 0, z1 / np.where(n1 > 0, n1, 1), 0.0)
        b = np.where(n2 > 0, z2 / np.where(n2 > 0, n2, 1), 0.0)
    return a @ b.T


def ranks_from_scores(scores, gold_cols, candidate_ids):
    """1-based rank of each row's gold column, descending score, ties -> lower id first.

    ``scores`` is (q, c) over candidates ordered by ``candidate_ids``;
    ``gold_cols`` indexes the gold candidate column of each row.
    """
    scores = np.asarray(scores)
    rows = np.arange(len(gold_cols))
    gold = scores[rows, gold_cols][:, None]
    gold_id = np.asarray(candidate_ids)[gold_cols][:, None]
    ids = np.asarray(candidate_ids)[None, :]
    better = (scores > gold) | ((scores == gold) & (ids < gold_id))
    return 1 + better.sum(axis=1)


def _as_numpy(z):
    if torch.is_tensor(z):
        return z.detach().cpu().numpy()
    return np.asarray(z)


def rank_alignments(z_o1, z_o2, test_pairs, candidates="test", scores=None):
    """Rank gold counterparts of ``test_pairs`` by cosine similarity, both directions.

    ``candidates="test"`` ranks among the other side's entities of
    ``test_pairs``; ``"all"`` ranks among every entity of the other KG.
    ``scores`` may supply a precomputed full (n1, n2) similarity matrix.
    """
    pairs = np.asarray(test_pairs, dtype=np.int64).reshape(-1, 2)
    if scores is None:
        scores = cosine_scores(_as_numpy(z_o1), _as_numpy(z_o2))
    scores = np.asarray(scores)
    if candidates == "test":
        cand1, cand2 = pairs[:, 0], pairs[:, 1]
        gold12 = gold21 = np.arange(len(pairs))
    elif candidates == "all":
        cand1, cand2 = np.arange(scores.shape[0]), np.arange(scores.shape[1])
        gold12, gold21 = pairs[:, 1], pairs[:, 0]
    else:
        raise ValueError(f"unknown candidate set {candidates!r}")
    s12 = scores[np.ix_(pairs[:, 0], cand2)]
    s21 = scores[np.ix_(cand1, pairs[:, 1])].T
    return RankingResult(
        pairs=pairs,
        ranks_12=ranks_from_scores(s12, gold12, cand2),
        ranks_21=ranks_from_scores(s21, gold21, cand1),
        n_candidates_12=len(cand2),
        n_candidates_21=len(cand1),
    )


def metrics_from_ranks(ranks):
    ranks = np.asarray(ranks, dtype=np.float64)
    return float(np.mean(ranks <= 1)), float(np.mean(ranks <= 10)), float(np.mean(1.0 / ranks))


def compute_metrics(r, direction="both", metadata=None):
    """Hits@1, Hits@10 and MRR; ``both`` averages the two directions."""
    n = len(r.pairs)
    if n == 0:
        return MetricsReport(None, None, None, 0, dict(metadata or {}))
    if direction == "both":
        a = metrics_from_ranks(r.ranks_12)
        b = metrics_from_ranks(r.ranks_21)
        h1, h10, mrr = ((x + y) / 2 for x, y in zip(a, b))
    else:
        h1, h10, mrr = metrics_from_ranks(r.ranks(direction))
    meta = dict(metadata or {})
    meta.setdefault("direction", direction)
    return MetricsReport(h1, h10, mrr, n, meta)
