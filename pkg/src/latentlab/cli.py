"""Command-line front door: run, verify, compare, report."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .errors import LatentLabError


def cmd_run(args: argparse.Namespace) -> int:
    cfg = harness.parse_config(Path(args.config).read_text())
    out = harness.resolve_out_dir(cfg, args.out, Path(args.config).stem)
    summary = harness.execute_run(cfg, out, jobs=args.jobs)
    print(f"run directory: {out}")
    print(summary, end="")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    # imported here so plain runs never pay for the check battery's imports
    from .verification import run_checks

    results = run_checks(args.pattern, inject_fault=args.inject_fault)
    if not results:
        print(f"no checks match {args.pattern!r}", file=sys.stderr)
        return 2
    width = max(len(name) for name, _ in results)
    failures = 0
    for name, res in results:
        status = "PASS" if res.ok else "FAIL"
        failures += 0 if res.ok else 1
        print(f"{status}  {name:<{width}}  {res.detail}")
    print(f"{len(results) - failures}/{len(results)} checks passed")
    return 1 if failures else 0


def cmd_compare(args: argparse.Namespace) -> int:
    print(harness.compare_runs([Path(d) for d in args.runs]), end="")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    for path in harness.write_report(Path(args.run)):
        print(path)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="latentlab",
        description="Exact-inference training laboratory for latent-rationale "
        "sequence models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a YAML config over its seeds")
    p_run.add_argument("config", help="path to the run config")
    p_run.add_argument("--out", default=None,
                       help="run directory (default: config 'out', then "
                       "$LATENTLAB_OUT/<config-stem>, then runs/<config-stem>)")
    p_run.add_argument("--jobs", type=int, default=1,
                       help="worker processes across seeds (default 1)")
    p_run.set_defaults(fn=cmd_run)

    p_verify = sub.add_parser("verify", help="run the named self-checks")
    p_verify.add_argument("--filter", dest="pattern", default=None,
                          help="glob over check names, e.g. 'planner.*'")
    p_verify.add_argument("--inject-fault", dest="inject_fault", default=None,
                          help="activate a named fault to prove checks catch it")
    p_verify.set_defaults(fn=cmd_verify)

    p_compare = sub.add_parser("compare",
                               help="align final metrics of runs on one task")
    p_compare.add_argument("runs", nargs="+", help="two or more run directories")
    p_compare.set_defaults(fn=cmd_compare)

    p_report = sub.add_parser("report",
                              help="pivot a run's records into series files")
    p_report.add_argument("run", help="run directory")
    p_report.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except LatentLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
