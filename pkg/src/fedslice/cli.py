"""Command line front end: run, validate and oracle."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .kernel import KernelError
from .oracle import InstanceTooLarge
from .runner import NoOracleQuestion, check, oracle_event, run
from .scenario import Scenario, ScenarioError, SchemaError, bundled_names, fmt_path, load, load_bundled

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_INPUT = 2


def _scenario(ref: str) -> Scenario:
    """A path, or the name of a bundled scenario when no such file exists."""
    if not Path(ref).exists() and ref in bundled_names():
        return load_bundled(ref)
    return load(ref)


def _report_input_error(exc: ScenarioError) -> int:
    if isinstance(exc, SchemaError):
        for path, msg in exc.errors:
            print(f"schema-violation {fmt_path(path)}: {msg}", file=sys.stderr)
    else:
        print(f"{exc.code}: {exc}", file=sys.stderr)
    return EXIT_INPUT


def _write(dest: str, text: str) -> None:
    if dest == "-":
        sys.stdout.write(text)
    else:
        Path(dest).write_text(text, encoding="utf-8")


def cmd_run(args: argparse.Namespace) -> int:
    scenario = _scenario(args.file)
    try:
        result = run(scenario, seed=args.seed, exact=True if args.exact_embedding else None)
    except KernelError as exc:
        print(f"{getattr(exc, 'code', 'kernel-error')}: {exc}", file=sys.stderr)
        return EXIT_CHECK
    if args.trace:
        _write(args.trace, result.trace_text)
    if args.metrics:
        _write(args.metrics, json.dumps(result.metrics, indent=2, sort_keys=True) + "\n")
    failed = False
    for name, verdict in sorted(result.patterns.items()):
        print(f"pattern {name}: {'ok' if verdict.ok else 'FAIL ' + verdict.detail}")
        failed |= not verdict.ok
    if args.check:
        for name, verdict in check(result).items():
            state = "skipped" if verdict.skipped else ("ok" if verdict.ok else "FAIL")
            print(f"check {name}: {state}{' ' + verdict.detail if verdict.detail else ''}")
            failed |= not verdict.ok
    if not args.metrics:
        m = result.metrics
        print(f"requests={m['requests']} admitted={m['admitted']} instantiated={m['instantiated']} "
              f"final_tick={m['final_tick']}")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    scenario = _scenario(args.file)
    print(f"{scenario.name}: ok ({len(scenario.domain_ids)} domains, {len(scenario.timeline)} timeline entries)")
    return EXIT_OK


def cmd_oracle(args: argparse.Namespace) -> int:
    scenario = _scenario(args.file)
    try:
        answer = oracle_event(scenario, args.event, seed=args.seed,
                              exact=True if args.exact_embedding else None)
    except (NoOracleQuestion, InstanceTooLarge) as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    print(json.dumps(answer, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedslice", description="Federated network slicing simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings from the simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario")
    p.add_argument("file", help="scenario file or bundled scenario name")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--exact-embedding", action="store_true")
    p.add_argument("--trace", metavar="OUT", help="write trace lines ('-' for stdout)")
    p.add_argument("--metrics", metavar="OUT", help="write the metrics report ('-' for stdout)")
    p.add_argument("--check", action="store_true", help="run every audit over the trace")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="validate a scenario file")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("oracle", help="ask the brute-force oracle about one timeline entry")
    p.add_argument("file")
    p.add_argument("--event", type=int, required=True, metavar="K", help="timeline index")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--exact-embedding", action="store_true")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ScenarioError as exc:
        return _report_input_error(exc)


if __name__ == "__main__":
    sys.exit(main())
