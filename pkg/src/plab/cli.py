"""Command-line entry point: ``plab <subcommand> --config PATH --out DIR``.

Every pipeline subcommand runs (or resumes) the stages it needs inside the
run directory; ``run`` goes all the way to the report.  ``PLAB_THREADS``
caps the BLAS worker count.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .experiment import (ConfigError, ManifestError, RunConfig, StageError, report,
                         run_pipeline, sweep)

UNTIL = {"gen-trigger": "triggers", "poison": "poison", "train": "victim", "eval": "metrics",
         "bounds": "bounds", "run": "bounds"}


def _seed_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--seed-override expects K=V, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = int(v)
        except ValueError as exc:
            raise ConfigError(f"seed {k!r} must be an integer") from exc
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = _seed_overrides(args.seed_override)
    return cfg.with_seed_overrides(overrides) if overrides else cfg


def _limit_threads():
    n = os.environ.get("PLAB_THREADS")
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(limits=max(1, int(n)))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in UNTIL:
        text = ("full pipeline, then report.json and charts" if name == "run"
                else f"run the pipeline through the {UNTIL[name]} stage")
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", type=Path)
        sp.add_argument("--out", type=Path, required=True)
        sp.add_argument("--seed-override", action="append", metavar="K=V")
        sp.add_argument("--cache", action="append", type=Path, default=[],
                        help="earlier run directory whose matching stages may be reused")
    sp = sub.add_parser("sweep", help="one run per axis value, aggregated to sweep.csv")
    sp.add_argument("--config", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--seed-override", action="append", metavar="K=V")
    sp.add_argument("--axis", required=True, choices=["alpha", "eta", "trigger_kind"])
    sp.add_argument("--values", required=True, help="comma-separated axis values")
    sp.add_argument("--cache", action="append", type=Path, default=[])
    sp = sub.add_parser("report", help="verify a run or sweep directory and emit charts")
    sp.add_argument("--out", type=Path, required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        if args.command == "report":
            for f in report(args.out):
                print(f)
            return 0
        cfg = _load_config(args)
        if args.command == "sweep":
            values = [_parse_value(v) for v in args.values.split(",") if v.strip()]
            print(sweep(cfg, args.axis, values, args.out, args.cache))
            return 0
        rep = run_pipeline(cfg, args.out, args.cache, UNTIL[args.command])
        if rep is not None:
            print(json.dumps(rep.data["condition"], indent=2, sort_keys=True))
        else:
            print(f"stages up to {UNTIL[args.command]!r} complete in {args.out}")
        return 0
    except (ConfigError, ManifestError, StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
