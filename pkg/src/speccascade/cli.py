"""Command-line entry point: ``speccascade {run,verify,frontier}``."""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from . import harness, verify


def _run(args) -> int:
    cfg = harness.load_config(args.config)
    cfg = harness.override(cfg, seed=args.seed, method=args.method, alpha=args.alpha, gamma=args.gamma,
                           temperature=args.temperature)
    rows = harness.run(cfg, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _verify(args) -> int:
    wanted = set(args.only or [])
    failed = 0
    for number, check in enumerate(verify.CHECKS, start=1):
        if wanted and number not in wanted:
            continue
        res = check()
        print(res.line(), flush=True)
        failed += not res.passed
    print("all checks passed" if not failed else f"{failed} check(s) failed")
    return 1 if failed else 0


def _frontier(args) -> int:
    rows_a = harness.read_csv(args.a)
    rows_b = harness.read_csv(args.b)
    if args.method_a:
        rows_a = [r for r in rows_a if r.method == args.method_a]
    if args.method_b:
        rows_b = [r for r in rows_b if r.method == args.method_b]
    report = harness.compare_frontiers(rows_a, rows_b)
    sys.stdout.write(report.render(args.method_a or "a", args.method_b or "b"))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="speccascade", description="Speculative cascade experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="sweep a config and write a CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--method", help="configured method name, or strategy[:rule]")
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=int)
    p.add_argument("--temperature", type=float)
    p.set_defaults(func=_run)

    p = sub.add_parser("verify", help="run the oracle self-checks")
    p.add_argument("--only", type=int, action="append", metavar="N", help="run only criterion N (repeatable)")
    p.set_defaults(func=_verify)

    p = sub.add_parser("frontier", help="compare two sweeps at matched deferral budgets")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--method-a")
    p.add_argument("--method-b")
    p.set_defaults(func=_frontier)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except harness.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
