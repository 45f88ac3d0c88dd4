import csv

import numpy as np
import pytest

from ibmea.errors import ConfigError
from ibmea.experiments import (
    ablation_suite,
    aggregate,
    image_dropout,
    noise_sweep,
    resplit,
    similarity_stratified_eval,
    write_table,
)
from ibmea.mmkg import build_task_features
from ibmea.training import evaluate_state, run_training


def test_unknown_variant_rejected(task20, tiny_cfg):
    with pytest.raises(ConfigError, match="w/o X-IB"):
        ablation_suite(task20, tiny_cfg, ["w/o X-IB"])


def test_ablation_rows_start_with_full(task20, tiny_cfg, tmp_path):
    rows = ablation_suite(task20, tiny_cfg, ["w/o V-IB", "full"])
    assert list(rows) == ["full", "w/o V-IB"]
    write_table(tmp_path / "t.csv", rows, seed=0)
    with open(tmp_path / "t.csv") as fh:
        assert [r["variant"] for r in csv.DictReader(fh)] == ["full", "w/o V-IB"]


def test_dropout_zero_is_identity_and_one_blanks(task20, tiny_cfg):
    m = tiny_cfg.model
    feats = build_task_features(task20, m.d_g, 0, m.d_a, m.d_r)
    same = image_dropout(feats, 0.0, 1)
    assert all(np.array_equal(a.x_v, b.x_v) for a, b in zip(feats, same))
    blank = image_dropout(feats, 1.0, 1)
    assert all(not f.x_v.any() for f in blank)
    with pytest.raises(ConfigError):
        image_dropout(feats, 1.5, 1)


def test_noise_rate_zero_matches_baseline(task20, tiny_cfg):
    state, _ = run_training(task20, tiny_cfg)
    base = evaluate_state(state, task20.test_pairs, tiny_cfg.candidates)
    retrained = noise_sweep(task20, tiny_cfg, [0.0])[0]
    reevaluated = noise_sweep(task20, tiny_cfg, [0.0], state=state)[0]
    for rep in (retrained, reevaluated):
        assert (rep.h1, rep.h10, rep.mrr) == (base.h1, base.h10, base.mrr)
    assert reevaluated.metadata["mode"] == "reevaluate"


def test_resplit_keeps_gold_alignment(task20):
    sub = resplit(task20, 0.25, 4)
    gold = lambda t: sorted(map(tuple, np.concatenate([t.train_pairs, t.test_pairs]).tolist()))
    assert gold(sub) == gold(task20)
    assert len(sub.train_pairs) == round(0.25 * 20) and sub.seed_ratio == 0.25


def test_similarity_buckets(task20, tiny_cfg):
    state, _ = run_training(task20, tiny_cfg)
    overall = evaluate_state(state, task20.test_pairs, tiny_cfg.candidates)
    (one,) = similarity_stratified_eval(task20, state, [])
    assert (one.h1, one.mrr, one.n_pairs) == (overall.h1, overall.mrr, overall.n_pairs)
    low, high = similarity_stratified_eval(task20, state, [5.0])  # cosine never reaches 5
    assert low.n_pairs == overall.n_pairs and high.n_pairs == 0 and high.h1 is None
    parts = similarity_stratified_eval(task20, state, [0.0, 0.5])
    assert sum(p.n_pairs for p in parts) == overall.n_pairs


def test_aggregate_mean_and_se():
    class R:
        def __init__(self, h1):
            self.h1 = h1

    out = aggregate([(0.1, 0, R(0.2)), (0.1, 1, R(0.4)), (0.2, 0, R(1.0))])
    assert out[0][:2] == (0.1, pytest.approx(0.3)) and out[0][2] == pytest.approx(0.1) and out[0][3] == 2
    assert out[1] == (0.2, 1.0, 0.0, 1)
