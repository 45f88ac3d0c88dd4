"""Command-line entry point: synth, train, eval, ablate, sweep.

Exit codes: 0 success, 1 I/O error, 2 invalid input or config, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import torch

from . import __version__
from .errors import ConfigError, NumericalError, ParseError, ValidationError
from .evaluation import DIRECTIONS
from .experiments import (
    ablation_suite,
    aggregate,
    noise_sweep,
    seed_ratio_sweep,
    similarity_stratified_eval,
    write_series,
    write_table,
)
from .mmkg import NoiseSpec, generate_synthetic_task, load_task, save_task
from .training import (
    AblationConfig,
    TrainConfig,
    evaluate_state,
    load_checkpoint,
    load_config,
    read_manifest,
    run_training,
    seed_streams,
)

logger = logging.getLogger("ibmea")

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _digest_inputs(*paths):
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            out[f.as_posix()] = hashlib.sha256(f.read_bytes()).hexdigest()
    return out


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def write_manifest(path, command, config, seed, inputs, outputs, started):
    _write_json(
        path,
        {
            "command": command,
            "config": config,
            "version": __version__,
            "seeds": seed_streams(seed) if seed is not None else None,
            "master_seed": seed,
            "inputs": _digest_inputs(*inputs),
            "outputs": [str(o) for o in outputs],
            "duration_s": round(time.time() - started, 3),
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        },
    )


def resolve_config(args):
    """Defaults, then the config file (validated in full), then explicit flags."""
    cfg = load_config(args.config) if args.config else TrainConfig()
    flags = {
        "epochs": args.epochs,
        "rng_seed": args.seed,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "eval_every": args.eval_every,
        "candidates": args.candidates,
    }
    cfg = replace(cfg, **{k: v for k, v in flags.items() if v is not None})
    if getattr(args, "variant", None):
        cfg = replace(cfg, ablation=AblationConfig.from_variant(args.variant))
    # re-run validation on the merged result
    return TrainConfig.from_dict(cfg.to_dict())


def _print_metrics(label, rec):
    print(f"{label}: H@1={rec['h1']:.4f} H@10={rec['h10']:.4f} MRR={rec['mrr']:.4f} (n={rec['n_pairs']})")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    started = time.time()
    task = generate_synthetic_task(
        args.entities,
        args.relations,
        args.attributes,
        args.image_dim,
        args.edge_prob,
        NoiseSpec(args.noise_edge, args.noise_attr, args.noise_image),
        args.seed_ratio,
        args.seed,
        attrs_per_entity=args.attrs_per_entity,
        image_coverage=args.image_coverage,
    )
    out = Path(args.out)
    save_task(task, out)
    params = {k: v for k, v in vars(args).items() if k not in ("func", "out", "verbose")}
    write_manifest(out / "manifest.json", "synth", params, args.seed, [], [out], started)
    print(f"wrote task to {out}: {len(task.train_pairs)} train / {len(task.test_pairs)} test pairs")
    return EXIT_OK


def cmd_train(args):
    started = time.time()
    cfg = resolve_config(args)
    task = load_task(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "log.ndjson"
    log_path.unlink(missing_ok=True)
    try:
        state, history = run_training(task, cfg, out_dir=out, log_path=log_path)
    except NumericalError as exc:
        dump = out / "nan_dump.json"
        _write_json(dump, {"error": str(exc), "terms": exc.terms})
        print(f"error: {exc}; per-term losses in {dump}", file=sys.stderr)
        return EXIT_NUMERIC
    final = history[-1]
    _write_json(out / "metrics.json", final)
    outputs = [log_path, out / "final.pt", out / "best.pt", out / "metrics.json"]
    write_manifest(out / "manifest.json", "train", cfg.to_dict(), cfg.rng_seed, [args.data, args.config], outputs, started)
    _print_metrics("test", final)
    print(f"train: H@1={final['train']['h1']:.4f} H@10={final['train']['h10']:.4f} MRR={final['train']['mrr']:.4f}")
    return EXIT_OK


def cmd_eval(args):
    ckpt = Path(args.checkpoint)
    if ckpt.suffix in (".pt", ".json"):
        ckpt = ckpt.with_suffix("")
    read_manifest(ckpt)  # manifest problems surface before any work
    task = load_task(args.data)
    state, cfg = load_checkpoint(ckpt, task)
    candidates = args.candidates or cfg.candidates
    report = evaluate_state(state, task.test_pairs, candidates, args.direction, {"checkpoint": str(ckpt)})
    rec = {"epoch": state.epoch, **report.to_dict()}
    if args.out:
        _write_json(args.out, rec)
    _print_metrics(f"test ({args.direction})", rec)
    return EXIT_OK


def cmd_ablate(args):
    started = time.time()
    cfg = resolve_config(args)
    task = load_task(args.data)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()] if args.variants else []
    out = Path(args.out)
    outputs = []
    for i in range(args.seeds):
        scfg = replace(cfg, rng_seed=cfg.rng_seed + i)
        rows = ablation_suite(task, scfg, variants)
        path = out / f"ablation_seed{scfg.rng_seed}.csv"
        write_table(path, rows, scfg.rng_seed)
        outputs.append(path)
        for name, rep in rows.items():
            print(f"seed {scfg.rng_seed} {name}: H@1={rep.h1:.4f}")
    write_manifest(out / "manifest.json", "ablate", cfg.to_dict(), cfg.rng_seed, [args.data, args.config], outputs, started)
    return EXIT_OK


def cmd_sweep(args):
    started = time.time()
    cfg = resolve_config(args)
    task = load_task(args.data)
    out = Path(args.out)
    points = []
    reports_path = out / f"{args.kind}_reports.ndjson"
    out.mkdir(parents=True, exist_ok=True)
    with open(reports_path, "w", encoding="utf-8") as fh:
        for i in range(args.seeds):
            scfg = replace(cfg, rng_seed=cfg.rng_seed + i)
            if args.kind == "noise":
                xs = args.rates or [0.0, 0.3, 0.6, 0.9]
                reps = noise_sweep(task, scfg, xs)
            elif args.kind == "seed-ratio":
                xs = args.ratios or [0.05, 0.1, 0.2, 0.3]
                reps = seed_ratio_sweep(task, scfg, xs, split_seed=scfg.rng_seed)
            else:
                xs = args.thresholds or [0.2, 0.5, 0.8]
                state, _ = run_training(task, scfg)
                reps = similarity_stratified_eval(task, state, xs, scfg.candidates)
                xs = [str(r.metadata["bucket"]) for r in reps]
            for x, rep in zip(xs, reps):
                points.append((x, scfg.rng_seed, rep))
                fh.write(json.dumps({"x": x, "seed": scfg.rng_seed, **rep.to_dict()}, sort_keys=True) + "\n")
    x_name = {"noise": "noise_rate", "seed-ratio": "seed_ratio", "similarity": "bucket"}[args.kind]
    series = out / f"{args.kind}_series.csv"
    write_series(series, x_name, points)
    agg_path = out / f"{args.kind}_aggregate.csv"
    with open(agg_path, "w", encoding="utf-8") as fh:
        fh.write(f"{x_name},mean_h1,stderr_h1,n_seeds\n")
        for x, mean, se, n in aggregate(points):
            fh.write(f"{x},{mean},{se},{n}\n")
            print(f"{x_name}={x}: mean H@1={mean} (se {se:.4f}, {n} seeds)")
    outputs = [reports_path, series, agg_path]
    write_manifest(out / "manifest.json", f"sweep {args.kind}", cfg.to_dict(), cfg.rng_seed, [args.data, args.config], outputs, started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p):
    p.add_argument("--config", help="JSON training config (every required key must be present)")
    p.add_argument("--data", required=True, help="task directory written by `synth`")
    p.add_argument("--seed", type=int, help="master seed (overrides config rng_seed)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--candidates", choices=("test", "all"))
    p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="ibmea", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic aligned pair of MMKGs")
    p.add_argument("--entities", type=int, default=100)
    p.add_argument("--relations", type=int, default=10)
    p.add_argument("--attributes", type=int, default=50)
    p.add_argument("--image-dim", type=int, default=32)
    p.add_argument("--edge-prob", type=float, default=0.05)
    p.add_argument("--attrs-per-entity", type=int, default=4)
    p.add_argument("--image-coverage", type=float, default=1.0)
    p.add_argument("--noise-edge", type=float, default=0.0)
    p.add_argument("--noise-attr", type=float, default=0.0)
    p.add_argument("--noise-image", type=float, default=0.0)
    p.add_argument("--seed-ratio", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and log periodic metrics")
    _add_config_flags(p)
    p.add_argument("--variant", help="ablation variant name (default: full model)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint path (with or without .pt)")
    p.add_argument("--data", required=True)
    p.add_argument("--direction", choices=DIRECTIONS, default="both")
    p.add_argument("--candidates", choices=("test", "all"))
    p.add_argument("--out", help="write metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the full model and ablation variants")
    _add_config_flags(p)
    p.add_argument("--variants", default="", help="comma-separated variant names")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="noise, seed-ratio or similarity-bucket sweeps")
    _add_config_flags(p)
    p.add_argument("--kind", choices=("noise", "seed-ratio", "similarity"), required=True)
    p.add_argument("--rates", type=_floats, help="image dropout rates")
    p.add_argument("--ratios", type=_floats, help="seed ratios")
    p.add_argument("--thresholds", type=_floats, help="raw image cosine bucket edges")
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("IBMEA_NUM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except (ConfigError, ValidationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
