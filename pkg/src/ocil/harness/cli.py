"""Command line entry point: ``ocil run``, ``ocil plot`` and ``ocil verify``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..ocp import DivergenceError, SolverFailure
from .config import ConfigError, parse_config, validate
from .logio import read_csv, write_csv
from .plotting import emit_plots
from .runner import run_trials, summarize

EXIT_OK, EXIT_CONFIG, EXIT_ALL_FAILED, EXIT_VERIFY = 0, 1, 2, 3

TRIALS_CSV = "trials.csv"
BASELINE_CSV = "baseline.csv"


def _cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config)
        if args.trials is not None:
            cfg = replace(cfg, trials=args.trials)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, out=args.out)
        validate(cfg)
        logs, base = run_trials(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverFailure, DivergenceError) as exc:
        # no trial can run without its data
        print(f"data generation failed: {exc}", file=sys.stderr)
        return EXIT_ALL_FAILED
    out = Path(cfg.out)
    write_csv(logs, out / TRIALS_CSV)
    if base:
        write_csv(base, out / BASELINE_CSV)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    s = summarize(logs)
    try:
        emit_plots(logs, out / "loss", baseline=base or None, title=f"{cfg.environment} {cfg.mode}")
    except ValueError as exc:
        print(f"plot skipped: {exc}", file=sys.stderr)
    print(f"{s['trials']} trials, {s['failed']} failed, median final/initial loss {s['median_ratio']}")
    print(f"wrote {out / TRIALS_CSV}")
    return EXIT_ALL_FAILED if s["failed"] == s["trials"] else EXIT_OK


def _cmd_plot(args) -> int:
    d = Path(args.in_dir)
    try:
        logs = read_csv(d / TRIALS_CSV)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    base = read_csv(d / BASELINE_CSV) if (d / BASELINE_CSV).exists() else None
    try:
        svg, side = emit_plots(logs, d / "loss", baseline=base)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {svg} and {side}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    from ..verification import run_all
    results = run_all(args.criteria or None)
    failed = [r.number for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return EXIT_VERIFY if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ocil", description="Online control-informed learning experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the trials of an experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--trials", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=_cmd_run)
    pl = sub.add_parser("plot", help="re-plot a run directory")
    pl.add_argument("--in", dest="in_dir", required=True)
    pl.set_defaults(func=_cmd_plot)
    v = sub.add_parser("verify", help="run the oracle suites for criteria 1-9")
    v.add_argument("criteria", nargs="*", type=int, help="subset of criterion numbers")
    v.set_defaults(func=_cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
