"""Command-line front end: ``cautious-rl <subcommand> --config run.json --out results/``.

Exit status is 0 on success, 2 for configuration errors and 3 for solver or
other runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .experiments import COMMANDS, ExperimentError, load_config, parse_seeds, resolve_config, run_command
from .mdp import MDPError
from .risk import BarrierViolation, RiskError
from .saddle import ConfigError, SolverError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_HELP = {
    "solve": "run the stochastic primal-dual solver per seed, then roll out the extracted policy",
    "bca": "variance-penalized block coordinate ascent against a risk-neutral solve",
    "kl-transfer": "reuse a source-task policy as a KL prior on a drifted task",
    "baseline": "value iteration reference: xi^T v* and the optimal policy's return moments",
    "oracle": "exact deterministic solve of the risk-penalized problem with KKT diagnostics",
    "rollout": "simulate a stored occupancy's policy (or the optimal policy) and record trajectories",
    "gridworld": "write a grid environment as an MDP file with an ASCII rendering",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cautious-rl", description="Risk-penalized occupancy-measure solvers.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name in COMMANDS:
        p = sub.add_parser(name, help=_HELP[name], description=_HELP[name])
        p.add_argument("--config", type=Path, help="JSON run configuration (defaults apply when omitted)")
        p.add_argument("--out", type=Path, default=Path("results"), help="output directory (default: results)")
        p.add_argument("--seeds", help="seed list like 0,1,2 or inclusive range like 0..9")
        p.add_argument("--format", choices=("csv", "json"), default="csv", help="time-series file format")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = load_config(args.config) if args.config is not None else {}
        if args.seeds is not None:
            doc["seeds"] = parse_seeds(args.seeds)
        cfg = resolve_config(doc, args.command)
        base_dir = args.config.parent if args.config is not None else None
        summary = run_command(args.command, cfg, args.out, fmt=args.format, base_dir=base_dir)
    except BarrierViolation as exc:
        print(f"error: solver left the barrier domain: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ExperimentError, ConfigError, MDPError, RiskError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, RuntimeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"runtime error in {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"command": args.command, "out": str(args.out), "wall_seconds": summary["wall_seconds"]}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
