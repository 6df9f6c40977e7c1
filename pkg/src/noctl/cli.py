"""Command-line entry point.

Exit codes: 0 success, 1 configuration/validation error, 2 numerical
failure, 3 check-suite failure.
"""

from __future__ import annotations

import argparse
import sys

from . import harness
from .errors import ConfigError, EvaluationError, NoctlError, NumericalError


def build_parser():
    parser = argparse.ArgumentParser(
        prog="noctl",
        description="Train operator surrogates and solve optimal control problems "
        "against them.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--force", action="store_true",
                       help="allow overwriting existing output files")

    common(sub.add_parser("train", help="train the operator surrogate"))
    common(sub.add_parser("reference", help="generate reference controls/targets"))
    solve = sub.add_parser("solve", help="optimize controls against the surrogate")
    common(solve)
    solve.add_argument("--routine", choices=["gd", "adam", "bfgs", "all"],
                       default="all")
    common(sub.add_parser("sweep", help="penalty/regularization sensitivity grid"))
    report = sub.add_parser("report", help="aggregate result rows into a table")
    report.add_argument("--out", required=True, help="directory holding results_*.csv")
    report.add_argument("--force", action="store_true")
    sub.add_parser("check", help="run the fast oracle self-checks")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "check":
            results = harness.cmd_check()
            return 0 if all(ok for _, ok, _ in results) else 3
        if args.command == "report":
            harness.cmd_report(args.out, force=args.force)
            return 0
        cfg = harness.load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.command == "train":
            harness.cmd_train(cfg, args.out, force=args.force)
        elif args.command == "reference":
            harness.cmd_reference(cfg, args.out, force=args.force)
        elif args.command == "solve":
            routines = ("gd", "adam", "bfgs") if args.routine == "all" else (args.routine,)
            harness.cmd_solve(cfg, args.out, routines=routines, force=args.force)
        elif args.command == "sweep":
            harness.cmd_sweep(cfg, args.out, force=args.force)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, EvaluationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except NoctlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
