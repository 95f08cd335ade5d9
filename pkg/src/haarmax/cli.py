"""Command line entry point: run / invariants / report."""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .experiments import (ExperimentConfig, emit_report, load_report, render_summary,
                          run_experiment)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--level", type=int, help="override the finest level L")
    p.add_argument("--dim", type=int, help="override the dimension d")
    p.add_argument("--out", help="output path prefix (writes .csv and .json)")
    p.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")


def _override(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {k: getattr(args, k) for k in ("seed", "level", "dim", "out") if getattr(args, k) is not None}
    return dataclasses.replace(cfg, **changes).validate()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="haarmax", description="Dyadic Haar shift experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a config file")
    run.add_argument("config", help="path to an [experiment] key-value config")
    _common(run)
    inv = sub.add_parser("invariants", help="run every invariant suite")
    _common(inv)
    rep = sub.add_parser("report", help="re-render a saved JSON report")
    rep.add_argument("path", help="report .json file")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            print(render_summary(load_report(args.path)))
            return 0
        if args.command == "run":
            cfg = _override(ExperimentConfig.load(args.config), args)
        else:
            cfg = _override(ExperimentConfig(kind="invariants", level=8), args)
        report = run_experiment(cfg, threads=args.threads)
        paths = emit_report(report, cfg.out)
    except (ValueError, OSError) as exc:
        print(f"haarmax: error: {exc}", file=sys.stderr)
        return 2
    print(render_summary(report.to_dict()))
    for p in paths:
        print(f"wrote {p}")
    if cfg.kind == "invariants":
        return 0 if all(ok == tot for ok, tot in report.summary.values()) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
