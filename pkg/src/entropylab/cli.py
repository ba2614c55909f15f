"""Command-line entry point: ``entropylab {train,check-lemmas,compare,export-trajectories}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import lemma_suite, runner
from .config import ConfigError, list_presets, load_config

log = logging.getLogger("entropylab")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="entropylab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, fault_help):
        sp.add_argument("--config", default="micro-exact",
                        help=f"config file or preset name ({', '.join(list_presets())})")
        sp.add_argument("--seed", type=int, default=None, help="overrides train.seed")
        sp.add_argument("--out", default=None, help="output directory (overrides run.out)")
        sp.add_argument("--fault-inject", default=None, help=argparse.SUPPRESS if fault_help is None else fault_help)

    common(sub.add_parser("train", help="mid-train (optional) then RL; writes a run directory"),
           "test only: 'nonfinite@STEP' poisons the loss at STEP")
    common(sub.add_parser("check-lemmas", help="run every identity check across seeds"),
           "test only: 'wblock' corrupts the direct W-gradient")
    cp = sub.add_parser("compare", help="matched-seed runs for several SEAL weights")
    common(cp, None)
    cp.add_argument("--alphas", type=_floats, default=[0.0, 0.5], help="comma-separated, must include 0")
    cp.add_argument("--seeds", type=_ints, default=None, help="comma-separated seeds (default 0..4)")
    ep = sub.add_parser("export-trajectories", help="write one JSON line per training episode")
    ep.add_argument("run_dir")
    ep.add_argument("--out", default=None, help="destination file (default RUN_DIR/trajectories.jsonl)")
    return p


def cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed, out=args.out)
    result = runner.train(cfg, fault=args.fault_inject)
    print(f"{result.status}: {result.steps_completed}/{cfg.train.steps} steps -> {result.out}")
    if result.status != "completed":
        print(f"error: {result.message}", file=sys.stderr)
        return 1
    return 0


def cmd_check_lemmas(args) -> int:
    cfg = load_config(args.config, seed=args.seed, out=args.out)
    try:
        report = lemma_suite.run_suite(cfg, fault=args.fault_inject, log=print)
    except lemma_suite.GuardViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    path = lemma_suite.write_report(report, args.out or cfg.run.out)
    n = len(report["checks"])
    bad = sum(not c["passed"] for c in report["checks"])
    print(f"{n - bad}/{n} checks passed in {report['elapsed_seconds']:.1f}s; report {path}")
    if bad:
        print("failed: " + ", ".join(report["failed_checks"]))
    return 0 if report["passed"] else 1


def cmd_compare(args) -> int:
    cfg = load_config(args.config, out=args.out)
    seeds = args.seeds if args.seeds is not None else list(range(5))
    try:
        report = runner.compare(cfg, args.alphas, seeds)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for a, rows in report["paired_deltas"].items():
        for row in rows:
            cells = {k: row[k] for k in ("final_cosine_gap", "final_probe_accuracy", "peak_token_entropy")}
            print(f"alpha={a} seed={row['seed']} " + json.dumps(cells, sort_keys=True))
    return 0


def cmd_export(args) -> int:
    try:
        dest = runner.export_trajectories(args.run_dir, args.out)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(dest)
    return 0


COMMANDS = {"train": cmd_train, "check-lemmas": cmd_check_lemmas, "compare": cmd_compare,
            "export-trajectories": cmd_export}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
