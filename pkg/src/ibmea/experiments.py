"""Analysis harnesses: ablations, image-noise and seed-ratio sweeps, similarity buckets."""

from __future__ import annotations

import csv
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .evaluation import MetricsReport, compute_metrics, cosine_scores, rank_alignments
from .mmkg import AlignmentTask, NoiseSpec, build_task_features, generate_synthetic_task, split_pairs
from .training import VARIANTS, AblationConfig, KGTensors, evaluate_state, run_training, seed_streams

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ("variant", "h1", "h10", "mrr", "n_pairs", "seed")

# desk-scale noisy benchmark used by the trend checks
NOISY_TASK = dict(
    n_entities=300,
    n_relations=10,
    n_attributes=100,
    d_v=64,
    edge_prob=0.02,
    noise=NoiseSpec(edge_drop=0.2, attr_flip=0.6, image_noise=0.5),
)


def noisy_synthetic_task(rng_seed, seed_ratio=0.2):
    return generate_synthetic_task(**NOISY_TASK, seed_ratio=seed_ratio, rng_seed=rng_seed)


def _final_report(state, task, cfg, metadata):
    meta = {"rng_seed": cfg.rng_seed, "seed_ratio": task.seed_ratio, **metadata}
    return evaluate_state(state, task.test_pairs, cfg.candidates, metadata=meta)


def ablation_suite(task, cfg, variants, features=None):
    """Train the baseline and each named variant with the same seed; returns reports keyed by variant.

    The baseline ("full") row always comes first.
    """
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variant(s): {', '.join(unknown)}; expected a subset of {', '.join(VARIANTS)}")
    rows = {}
    for name in ["full", *[v for v in variants if v != "full"]]:
        vcfg = replace(cfg, ablation=AblationConfig.from_variant(name))
        state, _ = run_training(task, vcfg, features)
        rows[name] = _final_report(state, task, vcfg, {"variant": name})
        logger.info("variant %s: h1=%.4f", name, rows[name].h1)
    return rows


def image_dropout(features, rate, rng_seed):
    """Zero each image-feature coordinate independently with probability ``rate`` (no rescaling)."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"dropout rate {rate} outside [0, 1]")
    rng = np.random.default_rng(rng_seed)
    out = []
    for f in features:
        keep = rng.random(f.x_v.shape) >= rate
        out.append(f.replace(x_v=np.where(keep, f.x_v, 0.0).astype(f.x_v.dtype)))
    return tuple(out)


def noise_sweep(task, cfg, dropout_rates, state=None):
    """One report per dropout rate on the image features.

    Retrains from scratch per rate, or with ``state`` re-evaluates that
    trained model on the perturbed features. Each rate gets its own mask seed.
    """
    seeds = seed_streams(cfg.rng_seed)
    mcfg = cfg.model
    base = build_task_features(task, mcfg.d_g, seeds["data"], mcfg.d_a, mcfg.d_r)
    reports = []
    for i, rate in enumerate(dropout_rates):
        mask_seed = np.random.SeedSequence([seeds["data"], 1, i]).generate_state(1)[0]
        feats = image_dropout(base, rate, int(mask_seed))
        meta = {"noise_rate": float(rate), "mode": "retrain" if state is None else "reevaluate"}
        if state is None:
            trained, _ = run_training(task, cfg, feats)
            reports.append(_final_report(trained, task, cfg, meta))
        else:
            reports.append(_reevaluate(state, task, cfg, feats, meta))
    return reports


def _reevaluate(state, task, cfg, feats, meta):
    dtype = cfg.model.torch_dtype
    model = state.model
    model.eval()
    data = tuple(KGTensors(f, dtype) for f in feats)
    z1, z2 = model.embed(0, data[0]), model.embed(1, data[1])
    r = rank_alignments(z1, z2, task.test_pairs, cfg.candidates)
    meta = {"rng_seed": cfg.rng_seed, "seed_ratio": task.seed_ratio, **meta}
    return compute_metrics(r, metadata=meta).check()


def resplit(task, seed_ratio, rng_seed):
    """Same KGs and gold alignment, new train/test split at ``seed_ratio``."""
    gold = np.concatenate([task.train_pairs, task.test_pairs])
    gold = gold[np.argsort(gold[:, 0], kind="stable")]
    train, test = split_pairs(gold, seed_ratio, np.random.default_rng(rng_seed))
    return AlignmentTask(task.kg1, task.kg2, train, test, seed_ratio)


def seed_ratio_sweep(task, cfg, ratios, split_seed=0):
    reports = []
    for ratio in ratios:
        sub = resplit(task, ratio, split_seed)
        state, _ = run_training(sub, cfg)
        reports.append(_final_report(state, sub, cfg, {"seed_ratio": float(ratio)}))
    return reports


def raw_image_similarity(features, pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    s = cosine_scores(features[0].x_v[pairs[:, 0]], features[1].x_v[pairs[:, 1]])
    return np.diag(s) if len(pairs) else np.zeros(0)


def similarity_stratified_eval(task, state, thresholds, candidates="test"):
    """Metrics for test pairs bucketed by the cosine of their raw image features.

    Sorted thresholds t_1 < ... < t_k give buckets (-inf, t_1), [t_1, t_2), ..., [t_k, inf).
    Ranks are computed once over the full candidate set, then split by bucket.
    """
    edges = sorted(float(t) for t in thresholds)
    feats = [d.raw for d in state.data]
    sims = raw_image_similarity(feats, task.test_pairs)
    model = state.model
    model.eval()
    r = rank_alignments(model.embed(0, state.data[0]), model.embed(1, state.data[1]), task.test_pairs, candidates)
    bucket = np.searchsorted(np.asarray(edges), sims, side="right")
    bounds = [-np.inf, *edges, np.inf]
    reports = []
    for b in range(len(edges) + 1):
        idx = np.flatnonzero(bucket == b)
        meta = {"bucket": [bounds[b], bounds[b + 1]], "seed_ratio": task.seed_ratio}
        if len(idx) == 0:
            reports.append(MetricsReport(None, None, None, 0, meta))
            continue
        sub = replace(r, pairs=r.pairs[idx], ranks_12=r.ranks_12[idx], ranks_21=r.ranks_21[idx])
        reports.append(compute_metrics(sub, metadata=meta).check())
    return reports


def write_table(path, rows, seed):
    """CSV with one row per variant (columns: variant, h1, h10, mrr, n_pairs, seed)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for name, rep in rows.items():
            w.writerow([name, rep.h1, rep.h10, rep.mrr, rep.n_pairs, seed])


def write_series(path, x_name, points):
    """Per-figure series: ``points`` is a list of (x, seed, MetricsReport)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([x_name, "seed", "h1", "h10", "mrr", "n_pairs"])
        for x, seed, rep in points:
            w.writerow([x, seed, rep.h1, rep.h10, rep.mrr, rep.n_pairs])


def aggregate(points):
    """Mean and standard error of H@1 per x value, in first-seen x order."""
    by_x = {}
    for x, _, rep in points:
        by_x.setdefault(x, []).append(rep.h1)
    out = []
    for x, vals in by_x.items():
        vals = np.asarray([v for v in vals if v is not None], dtype=np.float64)
        se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out.append((x, float(vals.mean()) if len(vals) else None, se, len(vals)))
    return out
