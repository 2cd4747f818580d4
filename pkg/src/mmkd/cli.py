"""Command-line front end.

    mmkd [--config PATH] [--seed N] [--out-dir PATH] [--threads N] COMMAND ...

Every command writes ``resolved_config.json`` into its run directory before
doing any work. Failures print a JSON error object to stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path

from .distill import PRESETS as DISTILL_PRESETS
from .errors import ConfigError, ContractError, MMKDError
from .synthdata import MODALITIES

OUT_DIR_ENV = "MMKD_OUT_DIR"
DEFAULT_OUT_DIR = "runs"
EXIT_CODES = {"ConfigError": 2, "DataError": 3, "ContractError": 4}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmkd", description="Multimodal knowledge distillation experiments.")
    p.add_argument("--config", type=Path, help="experiment config JSON (strict keys)")
    p.add_argument("--seed", type=int, help="seed for data, initialisation and training order")
    p.add_argument("--out-dir", type=Path, help=f"output root (default ${OUT_DIR_ENV} or ./{DEFAULT_OUT_DIR})")
    p.add_argument("--threads", type=int, help="cap on BLAS threads")
    p.add_argument("-v", "--verbose", action="store_true", help="progress logging to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write train/holdout/val shards and a manifest")
    g.add_argument("--holdout-size", type=int, help="Z, clips held out for teacher weighting")

    for name, helptext in (("train-teacher", "train one modality teacher with cross-entropy"),
                           ("train-baseline", "train the appearance model with cross-entropy"),
                           ("train-omnivore", "train one shared model on all modalities")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--data-dir", type=Path, help="gen-data output (default OUT/data)")
        s.add_argument("--run-dir", type=Path, help="run directory (default under OUT)")
        if name == "train-teacher":
            s.add_argument("--modality", required=True, choices=MODALITIES)

    w = sub.add_parser("estimate-weights", help="holdout cross-entropy of each teacher and its weight")
    w.add_argument("--gamma", type=float, help="weighting temperature (default from config)")
    w.add_argument("--teachers", type=Path, nargs="+", help="teacher checkpoints (default OUT/teachers/*/model.ckpt)")
    w.add_argument("--holdout", type=Path, help="holdout shard (default OUT/data/holdout.shard)")
    w.add_argument("--output", type=Path, help="weights JSON (default OUT/weights.json)")

    d = sub.add_parser("distill", help="train the appearance student from the weighted teacher ensemble")
    d.add_argument("--weights", type=Path, help="weights JSON (default OUT/weights.json)")
    d.add_argument("--preset", choices=sorted(DISTILL_PRESETS), help="named lambda/gamma setting")
    d.add_argument("--lam", "--lambda", dest="lam", type=float, help="KL share of the loss")
    d.add_argument("--gamma", type=float, help="weighting temperature")
    d.add_argument("--tau", type=float, help="softening temperature")
    d.add_argument("--data-dir", type=Path)
    d.add_argument("--run-dir", type=Path)

    e = sub.add_parser("evaluate", help="metrics of a checkpoint on a shard")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--shard", type=Path, help="default OUT/data/val.shard")
    e.add_argument("--clips", type=int, default=1, help="temporal clips averaged at test time")
    e.add_argument("--crops", type=int, default=1, help="spatial crops averaged at test time")
    e.add_argument("--output", type=Path, help="report JSON (also printed)")

    s = sub.add_parser("sweep", help="lambda/gamma grid over seeds with TTA and omnivore comparisons")
    s.add_argument("--seeds", type=int, nargs="+", help="override the seed list")
    s.add_argument("--parallel", type=int, default=1, help="seeds run concurrently (default 1)")
    s.add_argument("--plots", action="store_true", help="also write SVG charts")
    s.add_argument("--run-dir", type=Path, help="default OUT/sweep")

    r = sub.add_parser("report", help="summarise a sweep directory and check its invariants")
    r.add_argument("--sweep-dir", type=Path, help="default OUT/sweep")
    r.add_argument("--plots", action="store_true", help="(re)write SVG charts")
    return p


def _limit_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise ConfigError("threads", "must be >= 1")
    from threadpoolctl import threadpool_limits
    threadpool_limits(limits=n)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _run(args: argparse.Namespace) -> int:
    from . import experiments as X

    out = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or DEFAULT_OUT_DIR)
    exp = X.ExperimentConfig.load(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        exp = exp.with_seed(args.seed)
    data_dir = getattr(args, "data_dir", None) or out / "data"
    cmd = args.command

    if cmd == "gen-data":
        if args.holdout_size is not None:
            exp = replace(exp, dataset=replace(exp.dataset, holdout_size=args.holdout_size))
        X.write_json(data_dir / "resolved_config.json", exp.to_dict())
        manifest = X.gen_data(exp.dataset, data_dir)
        _emit({"data_dir": str(data_dir), **manifest})
        return 0

    if cmd in ("train-teacher", "train-baseline", "train-omnivore"):
        default = {"train-teacher": out / "teachers" / str(getattr(args, "modality", "")),
                   "train-baseline": out / "baseline", "train-omnivore": out / "omnivore"}[cmd]
        run_dir = args.run_dir or default
        data = X.load_data(data_dir)
        exp = replace(exp, dataset=data[0])
        X.write_json(run_dir / "resolved_config.json", exp.to_dict())
        if cmd == "train-teacher":
            payload = X.run_teacher(exp, args.modality, data, run_dir)
        elif cmd == "train-baseline":
            payload = X.run_baseline(exp, data, run_dir)
        else:
            payload = X.run_omnivore(exp, data, run_dir)
        _emit({"run_dir": str(run_dir), "val": payload})
        return 0

    if cmd == "estimate-weights":
        gamma = exp.distill.gamma if args.gamma is None else args.gamma
        if not gamma > 0:
            raise ConfigError("gamma", f"must be > 0, got {gamma}")
        teachers = args.teachers or [out / "teachers" / m / "model.ckpt" for m in exp.teacher_order]
        holdout_path = args.holdout or data_dir / "holdout.shard"
        output = args.output or out / "weights.json"
        X.write_json(output.parent / "resolved_config.json", {**exp.to_dict(), "estimate_weights": {
            "gamma": gamma, "teachers": [str(t) for t in teachers], "holdout": str(holdout_path)}})
        if not Path(holdout_path).exists():
            raise X.DataError(f"missing shard {holdout_path}")
        holdout = X.read_shard(holdout_path)
        payload = X.estimate_weights(teachers, holdout.examples, holdout.config, gamma)
        X.write_json(output, payload)
        print(X.format_weights(payload), file=sys.stderr)
        _emit(payload)
        return 0

    if cmd == "distill":
        dist = DISTILL_PRESETS[args.preset] if args.preset else exp.distill
        overrides = {k: v for k, v in (("lam", args.lam), ("gamma", args.gamma), ("tau", args.tau)) if v is not None}
        dist = replace(dist, **overrides)
        weights = X.read_json(args.weights or out / "weights.json")
        data = X.load_data(data_dir)
        exp = replace(exp, dataset=data[0], distill=dist)
        run_dir = args.run_dir or out / "students" / f"lam{dist.lam:g}_gamma{dist.gamma:g}"
        X.write_json(run_dir / "resolved_config.json", exp.to_dict())
        ensemble = X.ensemble_from_weights(weights, dist)
        payload = X.run_distill(exp, ensemble, data, run_dir)
        _emit({"run_dir": str(run_dir), "val": payload})
        return 0

    if cmd == "evaluate":
        shard = args.shard or data_dir / "val.shard"
        target = args.output.parent if args.output else args.checkpoint.parent
        X.write_json(target / "resolved_config.json", {**exp.to_dict(), "evaluate": {
            "checkpoint": str(args.checkpoint), "shard": str(shard), "clips": args.clips, "crops": args.crops}})
        payload = X.run_evaluate(args.checkpoint, shard, args.clips, args.crops)
        if args.output:
            X.write_json(args.output, payload)
        _emit(payload)
        return 0

    if cmd == "sweep":
        sweep = exp.sweep
        if args.seeds:
            sweep = replace(sweep, seeds=tuple(args.seeds))
        elif args.seed is not None:
            sweep = replace(sweep, seeds=tuple(args.seed + i for i in range(len(sweep.seeds))))
        if args.plots:
            sweep = replace(sweep, plots=True)
        sweep = X.SweepSpec.from_dict(sweep.to_dict())  # re-validate against the cap
        if args.parallel < 1:
            raise ConfigError("parallel", "must be >= 1")
        exp = replace(exp, sweep=sweep)
        run_dir = args.run_dir or out / "sweep"
        X.write_json(run_dir / "resolved_config.json", exp.to_dict())
        summary = X.run_sweep(exp, run_dir, parallel=args.parallel)
        print(X.format_report(summary), file=sys.stderr)
        _emit({"run_dir": str(run_dir), "checks": summary["checks"]})
        return 0 if not X.check_sweep_dir(run_dir) else 1

    if cmd == "report":
        sweep_dir = args.sweep_dir or out / "sweep"
        summary = X.read_json(sweep_dir / "summary.json")
        text = X.format_report(summary)
        (sweep_dir / "report.md").write_text(text)
        if args.plots:
            X.write_plots(sweep_dir, summary)
        problems = X.check_sweep_dir(sweep_dir)
        print(text, end="")
        if problems:
            raise ContractError("; ".join(problems))
        return 0

    raise ConfigError("command", f"unknown command {cmd!r}")


def _error_payload(exc: BaseException) -> dict:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        payload["field"] = exc.field
    return payload


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _limit_threads(args.threads)
        return _run(args)
    except (MMKDError, OSError, ValueError) as exc:
        payload = _error_payload(exc)
        if not isinstance(exc, MMKDError):
            payload["traceback"] = traceback.format_exc(limit=3)
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return EXIT_CODES.get(type(exc).__name__, 1)


if __name__ == "__main__":
    sys.exit(main())
