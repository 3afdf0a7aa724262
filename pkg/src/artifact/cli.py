"""Command line entry point: run, validate and report subcommands.

Exit codes: 0 success, 1 validation failure, 2 numerical failure,
3 partial (some studies raised, others completed).
"""
from __future__ import annotations

import argparse
import sys

from . import harness

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL, EXIT_PARTIAL = 0, 1, 2, 3


def _load(args) -> harness.ExperimentPlan:
    if args.plan is None:
        plan = harness.ExperimentPlan.default()
    else:
        plan = harness.ExperimentPlan.load(args.plan, fill_defaults=args.fill_defaults)
    if args.seed is not None:
        plan.seed = args.seed
    if args.out is not None:
        plan.output_dir = args.out
    plan.validate()
    return plan


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="artifact", description="Vortex / kinetic experiment harness")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (("run", "execute a plan"), ("validate", "check a plan without running it")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--plan", help="plan JSON file (default: built-in full plan)")
        p.add_argument("--out", help="output directory (overrides the plan)")
        p.add_argument("--seed", type=int, help="base seed (overrides the plan)")
        p.add_argument("--fill-defaults", action="store_true",
                       help="allow a partial plan; missing keys take default values")
        if name == "run":
            p.add_argument("--threads", type=int, default=1, help="worker threads for studies")
    p = sub.add_parser("report", help="re-render report text and plots from a run directory")
    p.add_argument("--out", required=True, help="run directory holding report.json")
    sub.add_parser("default-plan", help="print the default plan JSON")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "default-plan":
        print(harness.aio.canonical_json(harness.DEFAULT_PLAN))
        return EXIT_OK
    if args.command == "report":
        try:
            report = harness.rerender(args.out)
        except (OSError, ValueError, KeyError, TypeError) as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_INVALID
        print("\n".join(report.lines()))
        return report.exit_code()
    try:
        plan = _load(args)
    except harness.PlanError as e:
        print(f"invalid plan: {e}", file=sys.stderr)
        return EXIT_INVALID
    if args.command == "validate":
        print(f"plan ok: {plan.scenario} ({plan.config_hash}), studies: {', '.join(plan.studies) or 'none'}")
        return EXIT_OK
    if args.threads < 1:
        print("invalid plan: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    report = harness.run_plan(plan, plan.output_dir, threads=args.threads)
    print("\n".join(report.lines()))
    return report.exit_code()


if __name__ == "__main__":
    sys.exit(main())
