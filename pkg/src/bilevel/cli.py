"""Command-line harness: bilevel run | sweep | compare | check.

Exit codes: 0 success, 1 check failure, 2 config error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import sys

from .bench import (CHECK_LEVELS, cmd_check, cmd_compare, cmd_run,
                    cmd_sweep, load_run_setup)
from .errors import ConfigError, ContractViolationError, NumericError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bilevel",
        description="Bilevel optimization benchmark harness")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="run config file")
        sp.add_argument("--out", default=None, help="output CSV path")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--trials", type=int, default=None)
        sp.add_argument("--quiet", action="store_true")

    common(sub.add_parser("run", help="run one solver, write per-trial CSV"))
    common(sub.add_parser("sweep",
                          help="sweep one config axis over a value list"))
    common(sub.add_parser("compare",
                          help="run several solvers on identical trials"))

    chk = sub.add_parser("check", help="verify oracles and solver identities")
    chk.add_argument("problem", help="problem name, e.g. example1")
    chk.add_argument("level", choices=CHECK_LEVELS)
    chk.add_argument("--seed", type=int, default=0)
    chk.add_argument("--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "check":
            return cmd_check(args.problem, args.level, seed=args.seed,
                             quiet=args.quiet)
        setup = load_run_setup(args.config, overrides={
            "out": args.out, "seed": args.seed, "trials": args.trials})
        if args.command == "run":
            return cmd_run(setup, quiet=args.quiet)
        if args.command == "sweep":
            return cmd_sweep(setup, quiet=args.quiet)
        return cmd_compare(setup, quiet=args.quiet)
    except (ConfigError, ContractViolationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
