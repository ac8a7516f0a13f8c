"""Command-line entry point: ``roughrobust <command> [--config FILE] [--out DIR]``.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure, 4 failed
check (self-test or policy certification).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import List, Optional

from .config import ConfigError, load_config
from .cost_eval import CostEvaluationError
from .experiments import RUNNERS, AcceptanceFailure
from .hjb_solver import HJBError
from .noise_models import NoiseError
from .policy import PolicyError
from .rde_solver import DivergenceError
from .rough_core import RoughPathError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_ACCEPTANCE = 0, 2, 3, 4

COMMANDS = {
    "validate": "validate",
    "lift": "lift",
    "hjb": "hjb-solve",
    "evaluate": "evaluate-cost",
    "noise-convergence": "noise-convergence",
    "robustness": "robustness-sweep",
}

log = logging.getLogger("roughrobust")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roughrobust",
                                     description="Rough-path noise approximations and control robustness.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "validate": "run the self-test suites",
        "lift": "write lifted noise sample paths",
        "hjb": "solve the HJB and export value, selector and policy",
        "evaluate": "Monte-Carlo cost of a policy under each noise level",
        "noise-convergence": "rough distance of noise approximations to Brownian motion",
        "robustness": "cost gaps of the HJB policy under approximate noise",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="YAML configuration file (defaults if omitted)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=_u64, help="run with this single seed")
        p.add_argument("--threads", type=_positive, default=1, help="worker threads for sweep cells")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    experiment = COMMANDS[args.command]
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg["experiment"] != experiment and args.config:
        log.info("config names experiment %r; running %r", cfg["experiment"], experiment)
    cfg.data["experiment"] = experiment
    if args.seed is not None:
        cfg.data["seeds"] = [args.seed]
    if args.out:
        cfg.data["output"] = args.out
    out = cfg["output"]
    try:
        result = RUNNERS[experiment](cfg, out, threads=args.threads)
    except AcceptanceFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    except (HJBError, DivergenceError, CostEvaluationError, NoiseError, RoughPathError, PolicyError,
            FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if experiment == "validate":
        print(json.dumps({"passed": result["passed"], "failed": result["failed"]}, sort_keys=True))
        return EXIT_OK if result["passed"] else EXIT_ACCEPTANCE
    print(f"{experiment}: wrote results to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
