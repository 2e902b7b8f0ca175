"""Command-line entry point: gen-data, pretrain, distill, eval, export-features.

Failures print a JSON error record on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .data import RECIPES, LabeledDataset, load_dataset, read_data_dir, write_data_dir
from .distill import load_job, run, write_run
from .harness import (CrossArchReport, EvalConfig, EvalReport, cross_arch_eval, evaluate,
                      export_features, load_report, save_report)
from .models import PretrainSchedule, load_checkpoint, parse_arch_id
from .supervision import build_pool, load_pool, merge_pools, save_pool


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def cmd_gen_data(args) -> dict:
    out = write_data_dir(args.out, args.recipe, args.seed)
    return {"out": str(out)}


def cmd_pretrain(args) -> dict:
    train, _ = read_data_dir(args.data)
    specs = [parse_arch_id(a, train.image_shape, train.num_classes) for a in args.arch]
    kwargs = {"snapshots": args.snapshots}
    if args.epochs is not None:
        kwargs["epochs"] = args.epochs
    pool = build_pool(specs, range(args.seeds), train, PretrainSchedule(**kwargs))
    out = Path(args.out)
    if (out / "pool.json").exists():
        pool = merge_pools([load_pool(out), pool])
    manifest = save_pool(out, pool)
    return {"out": str(manifest), "checkpoints": len(pool)}


def _resolve(path: str | None, base: Path) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    return base / p


def cmd_distill(args) -> dict:
    cfg = Path(args.config)
    job = load_job(cfg)
    data = _resolve(job.data_path, cfg.parent)
    if data is None:
        raise ValueError("job config has no data_path")
    train, _ = read_data_dir(data)
    pool_path = _resolve(job.pool_path, cfg.parent)
    pool = load_pool(pool_path) if pool_path is not None else None
    result = run(job, train, pool)
    out = write_run(args.out, job, result)
    return {"out": str(out), "iterations": len(result.log)}


def cmd_eval(args) -> dict:
    syn = load_dataset(args.synthetic)
    _, test = read_data_dir(args.data)
    archs = [parse_arch_id(a, test.image_shape, test.num_classes) for a in args.arch]
    config = EvalConfig(seed=args.seed) if args.epochs is None \
        else EvalConfig(seed=args.seed, epochs=args.epochs, decay_epoch=args.epochs // 2)
    out = Path(args.out)
    if args.baseline:
        base = load_report(args.baseline)
        if isinstance(base, CrossArchReport):
            baselines = {a: r for a, r in base.reports.items()}
        else:
            baselines = {base.arch: base}
        report = cross_arch_eval(syn, test, archs, baselines, args.repeats, config)
        path = save_report(out / "cross_arch_report.json", report)
        return {"out": str(path), "avg_gain": report.avg_gain}
    reports = {a.arch_id: evaluate(syn, test, a, args.repeats, config) for a in archs}
    if len(reports) == 1:
        (report,) = reports.values()
        path = save_report(out / "eval_report.json", report)
    else:
        path = save_report(out / "cross_arch_report.json",
                           CrossArchReport(reports, {a: 0.0 for a in reports}))
    return {"out": str(path), "means": {a: r.mean for a, r in reports.items()}}


def cmd_export_features(args) -> dict:
    model = load_checkpoint(args.model)
    data = load_dataset(args.data)
    path = export_features(model, data, args.out)
    return {"out": str(path), "rows": len(data)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ptmdistill")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a procedural dataset")
    g.add_argument("--recipe", required=True, choices=sorted(RECIPES))
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="train a checkpoint pool")
    t.add_argument("--arch", required=True, action="append")
    t.add_argument("--data", required=True)
    t.add_argument("--seeds", type=int, default=1)
    t.add_argument("--snapshots", type=_int_list, default=PretrainSchedule().snapshots)
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_pretrain)

    d = sub.add_parser("distill", help="run a distillation job")
    d.add_argument("--config", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("eval", help="train on a synthetic set and report test accuracy")
    e.add_argument("--synthetic", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--arch", required=True, action="append")
    e.add_argument("--repeats", type=int, default=5)
    e.add_argument("--baseline")
    e.add_argument("--epochs", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-features", help="write penultimate features as CSV")
    x.add_argument("--model", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code:
            print(json.dumps({"error": "UsageError", "message": "invalid arguments"}),
                  file=sys.stderr)
        return int(exc.code or 0)
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        print(json.dumps({"error": type(exc).__name__, "message": str(exc),
                          "command": args.command}), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
