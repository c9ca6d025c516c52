"""Command-line entry point: ``gpsformer <command> [flags] [--dotted.key value ...]``.

stdout carries one JSON document per command; logs go to stderr.
Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import (ArgumentError, CheckpointError, ConfigError, EpisodeError, GPSFormerError, ParseError,
                     ShapeError)

log = logging.getLogger("gpsformer")

VALIDATION_ERRORS = (ArgumentError, ConfigError, ParseError, ShapeError, EpisodeError, CheckpointError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=1, default=float) + "\n")
    sys.stdout.flush()


def _run_config(args, extra):
    from .config import RunConfig, parse_overrides
    overrides = parse_overrides(extra)
    for key in ("manifest", "out_dir", "checkpoint"):
        if getattr(args, key, None) is not None:
            overrides.append((key, str(getattr(args, key))))
    return RunConfig.load(getattr(args, "config", None), overrides)


def _no_extra(extra):
    if extra:
        raise ArgumentError(f"unrecognised arguments: {' '.join(extra)}")


# ------------------------------------------------------------------- commands

def cmd_gen_data(args, extra):
    _no_extra(extra)
    from .data import generate_synthetic
    classes = args.classes.split(",") if not args.classes.isdigit() else int(args.classes)
    m = generate_synthetic(args.out, classes=classes, per_class=args.per_class,
                           points_per_cloud=args.points, noise_sigma=args.noise, seed=args.seed,
                           train_fraction=args.train_fraction, fmt=args.format, with_parts=args.parts)
    return {"manifest": str(Path(args.out) / "manifest.json"), "classes": m.class_names,
            "train": len(m.indices("train")), "test": len(m.indices("test"))}


def cmd_train(args, extra):
    from .data import DatasetManifest
    from .model import build_model
    from .train import train
    rc = _run_config(args, extra)
    if not rc["manifest"] or not rc["out_dir"]:
        raise ArgumentError("train needs --manifest and --out-dir (flags or config keys)")
    manifest = DatasetManifest.load(rc["manifest"])
    if rc["task"] == "classify":
        rc.set_default("num_classes", manifest.num_classes)
    model_cfg, train_cfg = rc.model_config(), rc.train_config()
    out = Path(rc["out_dir"])
    rc.save(out / "run_config.json")
    model = build_model(model_cfg)
    result = train(model, manifest, train_cfg, out_dir=out)
    return {"out_dir": str(out), "epochs": len(result.history), "best": result.best,
            "final": result.history[-1] if result.history else None,
            "best_checkpoint": result.best_checkpoint, "last_checkpoint": result.last_checkpoint}


def cmd_eval(args, extra):
    _no_extra(extra)
    from .checkpoint import load_checkpoint
    from .data import DatasetManifest
    from .train import evaluate
    model, _, _ = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.load(args.manifest)
    m = evaluate(model, manifest, args.split, vote_count=args.vote, seed=args.seed, batch_size=args.batch_size)
    return m.to_dict()


def cmd_fewshot(args, extra):
    from dataclasses import replace

    from .data import DatasetManifest, EpisodeSpec
    from .model import build_model
    from .train import fewshot_eval
    rc = _run_config(args, extra)
    manifest = DatasetManifest.load(args.manifest)
    base = rc.model_config()
    train_cfg = rc.train_config()
    spec = EpisodeSpec(args.n_way, args.m_shot, args.queries, args.seed)

    def builder(n_way, seed):
        return build_model(replace(base, num_classes=n_way, seed=seed))

    res = fewshot_eval(builder, manifest, spec, train_cfg, trials=args.trials, split=args.split)
    if rc["out_dir"]:
        rc.save(Path(rc["out_dir"]) / "run_config.json")
    return res


def cmd_bench(args, extra):
    _no_extra(extra)
    from .model import GPSFormerConfig, build_model, complexity_report
    kw = dict(variant=args.variant, task=args.task, num_points=args.points, num_classes=args.num_classes)
    if args.task == "segment":
        kw["num_categories"] = args.num_categories
    cfg = GPSFormerConfig(**kw)
    rep = complexity_report(build_model(cfg), args.points)
    return {"variant": args.variant, "task": args.task, "num_points": args.points, **rep}


def cmd_gradcheck(args, extra):
    _no_extra(extra)
    from .gradcheck import CASE_NAMES, run_suite
    names = args.only.split(",") if args.only else None
    if names:
        unknown = sorted(set(names) - set(CASE_NAMES))
        if unknown:
            raise ArgumentError(f"unknown gradcheck cases: {unknown}")
    results = run_suite(names, seed=args.seed)
    out = {"passed": all(r.passed for r in results),
           "max_rel_err": max(r.max_rel_err for r in results),
           "cases": [r.to_dict() for r in results]}
    return out


def cmd_dump_features(args, extra):
    _no_extra(extra)
    from . import autodiff as ad
    from .checkpoint import load_checkpoint
    from .data import DatasetManifest, iterate_batches, load_arrays
    model, _, _ = load_checkpoint(args.checkpoint)
    if model.cfg.task != "classify":
        raise ArgumentError("dump-features needs a classification checkpoint")
    manifest = DatasetManifest.load(args.manifest)
    idx = manifest.indices(args.split)
    if not idx:
        raise ArgumentError(f"split {args.split!r} is empty")
    pts, cls, _ = load_arrays(manifest, idx, model.cfg.num_points)
    feats = []
    with ad.no_grad():
        for b in iterate_batches(len(pts), args.batch_size):
            feats.append(model.features(pts[b]).data)
    feats = np.concatenate(feats)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "class_id"] + [f"f{i}" for i in range(feats.shape[1])])
        for i, c, f in zip(idx, cls, feats):
            w.writerow([i, int(c)] + [repr(float(v)) for v in f])
    return {"path": str(out), "rows": int(feats.shape[0]), "dims": int(feats.shape[1])}


# --------------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="gpsformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic primitive-shape dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", default="4", help="count (first N primitives) or comma list")
    g.add_argument("--per-class", type=int, default=250)
    g.add_argument("--points", type=int, default=256)
    g.add_argument("--noise", type=float, default=0.005)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.add_argument("--format", choices=("binary", "ascii"), default="binary")
    g.add_argument("--parts", action="store_true", help="also store per-point part labels")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model; extra --key value pairs override the config")
    t.add_argument("--config")
    t.add_argument("--manifest")
    t.add_argument("--out-dir", dest="out_dir")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--vote", type=int, default=1)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--batch-size", type=int, default=32)
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("fewshot", help="n-way m-shot episodes; extra --key value pairs override the config")
    f.add_argument("--config")
    f.add_argument("--manifest", required=True)
    f.add_argument("--out-dir", dest="out_dir")
    f.add_argument("--n-way", type=int, default=5)
    f.add_argument("--m-shot", type=int, default=10)
    f.add_argument("--queries", type=int, default=20)
    f.add_argument("--trials", type=int, default=10)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--split", default=None)
    f.set_defaults(fn=cmd_fewshot)

    b = sub.add_parser("bench", help="parameter and multiply-accumulate counts")
    b.add_argument("--variant", choices=("full", "elite"), default="full")
    b.add_argument("--task", choices=("classify", "segment"), default="classify")
    b.add_argument("--points", type=int, default=1024)
    b.add_argument("--num-classes", type=int, default=15)
    b.add_argument("--num-categories", type=int, default=16)
    b.set_defaults(fn=cmd_bench)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--only", help="comma-separated case names")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)

    d = sub.add_parser("dump-features", help="write global descriptors as CSV")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--manifest", required=True)
    d.add_argument("--split", default="test")
    d.add_argument("--out", required=True)
    d.add_argument("--batch-size", type=int, default=32)
    d.set_defaults(fn=cmd_dump_features)
    return p


def _thread_limit():
    n = os.environ.get("GPSFORMER_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        n = int(n)
    except ValueError as e:
        raise ConfigError(f"GPSFORMER_THREADS must be an integer, got {n!r}") from e
    if n < 1:
        raise ConfigError("GPSFORMER_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args, extra = build_parser().parse_known_args(argv)
    except ArgumentError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            result = args.fn(args, extra)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (GPSFormerError, OSError, ValueError, FloatingPointError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    _emit(result)
    if args.command == "gradcheck" and not result["passed"]:
        failed = [c["name"] for c in result["cases"] if not c["passed"]]
        print(f"error: gradient check failed for {failed}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
