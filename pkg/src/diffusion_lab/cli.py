"""Command-line entry point."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .experiments import (
    EXIT_CONFIG,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_VIOLATION,
    ConfigError,
    NumericalFailure,
    execute,
    load_config,
)
from .processes import SimulationError
from .quadrature import QuadratureError

SUBCOMMANDS = {
    "divergence": "divergence",
    "rate-study": "rate_study",
    "schedule-sweep": "schedule_sweep",
    "reverse-check": "reverse_check",
    "tweedie-check": "tweedie_check",
    "figure1": "figure1",
}


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("expected an unsigned 64-bit integer")
    return value


def _u32_positive(text: str) -> int:
    value = int(text, 0)
    if not 1 <= value < 2**32:
        raise argparse.ArgumentTypeError("expected a positive 32-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffusion-lab", description="Discretized diffusion sampler experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config document")
        p.add_argument("--seed", type=_u64, help="master seed (overrides config)")
        p.add_argument("--paths", type=_u64, help="Monte Carlo paths (overrides config)")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--workers", type=_u32_positive, help="worker threads (overrides config)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    overrides = {"seed": args.seed, "paths": args.paths, "out": args.out, "workers": args.workers}
    try:
        cfg = load_config(args.config, SUBCOMMANDS[args.command], overrides)
        result, manifest = execute(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, SimulationError, QuadratureError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"{cfg.experiment}: {len(result.rows)} rows -> {cfg.out}/results.csv")
    for key, value in result.summary.items():
        if key != "reports":
            print(f"  {key}: {value}")
    if result.violations:
        for v in result.violations:
            print(f"violation: {v}", file=sys.stderr)
        return EXIT_VIOLATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
