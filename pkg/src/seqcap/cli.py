"""Command line front ends.

Two console scripts are installed: ``client`` drives scenarios and
benchmarks against a throwaway local deployment, ``model-check`` runs the
bounded exploration of the transition system and prints a JSON verdict.

Exit codes: 0 success, 1 an assertion failed (a scenario step came out
wrong, a benchmark could not produce numbers, the model found a violation),
2 the environment broke (servers would not start, connections refused).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import httpx

from .bench import ALGS, run_bench
from .client import run_scenario_file
from .errors import ConfigTooLarge, DeploymentError, InvariantViolation, ScenarioMismatch
from .model import RELAXATIONS, ModelConfig, explore
from .scenarios import bundled_names, bundled_path

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_ENVIRONMENT = 2


def _resolve_scenario(ref: str) -> Path:
    """A scenario argument is a file path or the bare name of a bundled one."""
    path = Path(ref)
    if path.exists():
        return path
    try:
        return bundled_path(ref)
    except FileNotFoundError as exc:
        raise ScenarioMismatch(str(exc)) from exc


def _cmd_run(args: argparse.Namespace) -> int:
    outcomes = run_scenario_file(_resolve_scenario(args.scenario), profile=args.profile)
    for outcome in outcomes:
        print(outcome.line())
    failed = [o for o in outcomes if not o.ok]
    if failed or not outcomes:
        print(f"scenario failed at step {failed[0].index}" if failed else "scenario has no steps")
        return EXIT_ASSERTION
    print(f"scenario passed ({len(outcomes)} steps)")
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    report = run_bench(
        target=args.target,
        mode=args.mode,
        alg=args.alg,
        n=args.n,
        runs=args.runs,
        workers=args.workers,
    )
    print(report.summary())
    if args.out:
        report.write_csv(args.out)
        print(f"per-request latencies written to {args.out}")
    return EXIT_OK


def client_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="client", description="Drive scenarios and benchmarks against a local deployment."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="run a scenario file or a bundled scenario by name")
    run_parser.add_argument(
        "scenario", help=f"path to a scenario JSON, or one of: {', '.join(bundled_names())}"
    )
    run_parser.add_argument("--profile", default=None, help="override the scenario's deployment profile")
    run_parser.set_defaults(func=_cmd_run)

    bench_parser = sub.add_parser("bench", help="measure request latency against a local deployment")
    bench_parser.add_argument("--target", choices=("authz", "resource"), default="authz")
    bench_parser.add_argument(
        "--mode",
        choices=("full", "plain"),
        default="full",
        help="full also measures the plain baseline and reports the overhead ratio",
    )
    bench_parser.add_argument("--alg", choices=tuple(ALGS), default="ecdsa")
    bench_parser.add_argument("--n", type=int, default=100, help="requests per run")
    bench_parser.add_argument("--runs", type=int, default=5, help="independent runs (default 5)")
    bench_parser.add_argument("--workers", type=int, default=100, help="concurrent senders (default 100)")
    bench_parser.add_argument("--out", default=None, help="write per-request latencies as CSV")
    bench_parser.set_defaults(func=_cmd_bench)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScenarioMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ASSERTION
    except (DeploymentError, httpx.HTTPError, OSError) as exc:
        print(f"environment error: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT


def model_check_main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="model-check",
        description="Exhaustively explore a bounded instance of the transition system.",
    )
    parser.add_argument("--rs", type=int, required=True, help="number of resource servers")
    parser.add_argument(
        "--seq",
        required=True,
        help='permission sequence, e.g. "RS1:p1,RS2:p2" (servers are 1-based)',
    )
    parser.add_argument("--depth", type=int, required=True, help="exploration depth bound")
    parser.add_argument(
        "--mutate",
        choices=RELAXATIONS,
        action="append",
        default=None,
        help="drop one enforcement rule; the run should then find a counterexample",
    )
    args = parser.parse_args(argv)

    try:
        config = ModelConfig.from_spec(args.rs, args.seq)
        verdict = explore(config, depth=args.depth, relax=frozenset(args.mutate or ()))
    except (InvariantViolation, ConfigTooLarge) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    print(json.dumps(verdict.render(), indent=2))
    return EXIT_OK if verdict.ok else EXIT_ASSERTION


if __name__ == "__main__":
    sys.exit(client_main())


__all__ = ["client_main", "model_check_main"]
