"""Command-line entry point: ``magalign {run,diagnose,oracles,sweep,multiseed}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .experiments import clean_json, run_diagnostics, run_experiment, run_multiseed, run_oracles, run_sweep

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

COMMANDS = {
    "run": (run_experiment, "train and report test retrieval"),
    "diagnose": (run_diagnostics, "frozen-feature diagnostics (overlap, purity, depth sweep, hard queries)"),
    "oracles": (run_oracles, "numerical checks of the smoothing dynamics"),
    "sweep": (run_sweep, "one run per value of sweep.parameter"),
    "multiseed": (run_multiseed, "repeat a run over multiseed.seeds and aggregate"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="magalign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML config file (defaults apply when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key; repeatable")
        p.add_argument("--out", help="output directory for result files")
        p.add_argument("--seed", type=int, help="training seed (shorthand for --set train.seed=N)")
        p.add_argument("--quiet", action="store_true", help="only print errors")
    return parser


def _headline(command: str, report: dict) -> dict:
    if command == "run":
        return {"protocol": report["protocol"], "test": report["test"]["avg"], "checkpoint": report["checkpoint"]}
    if command == "oracles":
        return {"passed": report["passed"]}
    if command == "multiseed":
        return {"summary": report["summary"], "failures": report["failures"]}
    if command == "sweep":
        return {"parameter": report["parameter"], "runs": report["runs"]}
    return {k: report[k] for k in ("knn_overlap", "purity") if k in report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    func, _ = COMMANDS[args.command]
    try:
        report = func(cfg, args.out)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to one exit code
        logging.getLogger("magalign").debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if not args.quiet:
        print(json.dumps(clean_json(_headline(args.command, report)), indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
