"""Command line entry point ``traffic-incentives``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .scenario import Scenario, ScenarioError, load_scenario

log = logging.getLogger("traffic_incentives")


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", default="congestion_demo",
                       help="scenario JSON file, or the name of a bundled scenario (default: congestion_demo)")
    p.add_argument("--seed", type=int, default=None, help="overrides the scenario seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for the inner loop (1 is deterministic)")
    p.add_argument("--out-dir", default=".", help="directory for CSV output")
    p.add_argument("--verbose", action="store_true")


def _problem_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["personalized", "uniform"], default=None)
    p.add_argument("--objective", choices=["ttt", "revenue"], default=None)
    p.add_argument("--budget", type=float, default=None, help="overrides the scenario budget")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="traffic-incentives",
                                     description="Discount design for parking and charging facilities.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="optimize discounts for one scenario")
    _common(p)
    _problem_flags(p)
    p.add_argument("--save-scenario", action="store_true", help="also write the materialized scenario JSON")

    p = sub.add_parser("sweep-budget", help="optimize for a list of budgets")
    _common(p)
    _problem_flags(p)
    p.add_argument("--budgets", type=float, nargs="+", required=True)

    p = sub.add_parser("compare-uniform", help="uniform against personalized discounts")
    _common(p)
    _problem_flags(p)

    p = sub.add_parser("scale-bench", help="time the solver on synthetic grids of growing size")
    _common(p, config=False)
    p.add_argument("--sizes", type=int, nargs="+", default=[25, 50, 100])
    p.add_argument("--inner-iters", type=int, default=20)
    p.add_argument("--outer-iters", type=int, default=2)

    p = sub.add_parser("validate", help="run the verification oracles on small seeded instances")
    _common(p, config=False)
    p.add_argument("--full", action="store_true", help="more random projection trials")
    return parser


def _scenario(args) -> Scenario:
    sc = load_scenario(args.config, args.seed)
    kw = {}
    if args.mode is not None:
        kw["uniform"] = args.mode == "uniform"
    if args.objective is not None:
        kw["objective"] = args.objective
    if getattr(args, "budget", None) is not None:
        kw["budget"] = args.budget
    return sc.with_problem(**kw) if kw else sc


def _print_rows(result: ex.ExperimentResult) -> None:
    for r in result.rows:
        print(f"budget={r.budget:g} mode={r.mode} TTT {r.TTT_baseline:.6g} -> {r.TTT_final:.6g} "
              f"({r.reduction_pct:.3f}%) spend={r.spend:.6g} time={r.wall_time:.1f}s")


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if args.command == "solve":
        sc = _scenario(args)
        result = ex.run_solve(sc, args.threads)
        result.write(out / "results.csv")
        o = result.outcomes[0]
        if o.report is not None:
            ex.write_csv(out / "trace.csv", ex.TRACE_HEADER, ex.trace_rows(o.report))
        ex.write_csv(out / "discounts.csv", ex.DISCOUNT_HEADER, ex.discount_rows(sc, o.c))
        if args.save_scenario:
            (out / "scenario.json").write_text(sc.to_json())
        _print_rows(result)
        return 0

    if args.command == "sweep-budget":
        sc = _scenario(args)
        result = ex.sweep_budget(sc, args.budgets, args.threads)
        result.write(out / "sweep.csv")
        for r, o in zip(result.rows, result.outcomes):
            if o.report is not None:
                ex.write_csv(out / f"trace_budget_{r.budget:g}.csv", ex.TRACE_HEADER, ex.trace_rows(o.report))
        _print_rows(result)
        return 0

    if args.command == "compare-uniform":
        sc = _scenario(args)
        result = ex.compare_uniform(sc, args.threads)
        result.write(out / "compare.csv")
        for r, o in zip(result.rows, result.outcomes):
            if o.report is not None:
                ex.write_csv(out / f"trace_{r.mode}.csv", ex.TRACE_HEADER, ex.trace_rows(o.report))
            ex.write_csv(out / f"discounts_{r.mode}.csv", ex.DISCOUNT_HEADER, ex.discount_rows(sc, o.c))
        _print_rows(result)
        return 0

    if args.command == "scale-bench":
        rows, slope = ex.scale_bench(args.sizes, 0 if args.seed is None else args.seed, args.inner_iters,
                                     args.outer_iters, args.threads)
        ex.write_csv(out / "scale.csv", ex.SCALE_HEADER, rows)
        for r in rows:
            print(f"n_v={r[0]} n_e={r[1]} inner/iter={r[5]:.4g}s max-agent/iter={r[6]:.4g}s outer step={r[7]:.4g}s")
        print(f"fitted exponent {slope:.3f}")
        if not np.isfinite(slope) or slope >= 3:
            print("per-iteration time grows at least cubically", file=sys.stderr)
            return 1
        return 0

    if args.command == "validate":
        rows = ex.validate(0 if args.seed is None else args.seed, quick=not args.full)
        ex.write_csv(out / "validate.csv", ex.VALIDATE_HEADER, rows)
        for name, ok, value, thr in rows:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {value:.3e} (threshold {thr:.1e})")
        return 0 if all(r[1] for r in rows) else 1
    return 2


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ScenarioError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
