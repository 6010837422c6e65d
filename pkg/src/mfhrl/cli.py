"""Command line: ``run``, ``sweep`` and ``report``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import STRATEGIES, ExperimentConfig, load_config, save_config
from .experiment import FLOAT_FMT, report, run, run_sweep, write_run

log = logging.getLogger("mfhrl")


def _config(path: Optional[str]) -> ExperimentConfig:
    return load_config(path) if path else ExperimentConfig()


def _floats(text: str) -> List[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _strategies(text: str) -> List[str]:
    names = [x.strip() for x in text.split(",") if x.strip()]
    bad = [n for n in names if n not in STRATEGIES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown strategies {bad}; choose from {STRATEGIES}")
    return names


def cmd_run(args) -> int:
    cfg = _config(args.config)
    strategy = args.strategy or cfg.run.strategy
    budget = cfg.run.budget if args.budget is None else args.budget
    seed = cfg.run.seeds[0] if args.seed is None else args.seed
    out = Path(args.out or cfg.run.output)
    res = run(cfg, seed, strategy, budget)
    write_run(out, res, cfg)
    save_config(cfg, out / "config.txt")
    print(f"{strategy} budget={FLOAT_FMT.format(budget)} seed={seed} "
          f"return={FLOAT_FMT.format(res.final_return)} optimum={FLOAT_FMT.format(res.optimal_return)} "
          f"rounds={len(res.records)} spent={FLOAT_FMT.format(res.ledger.spent)}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args.config)
    budgets = _floats(args.budgets) if args.budgets else [
        f * cfg.run.budget_max for f in (0.25, 0.6, 1.0)]
    strategies = args.strategies or list(STRATEGIES)
    seeds = list(range(args.seeds)) if args.seeds is not None else cfg.run.seeds
    out = Path(args.out or cfg.run.output)
    rows, agg, _ = run_sweep(cfg, budgets, strategies, seeds, out)
    for row in agg:
        print(f"{row['budget']:>8} {row['strategy']:<11} mean={row['mean_return']} "
              f"se={row['std_error']} n={row['n_seeds']} regret={row['mean_regret']}")
    failed = sum(1 for r in rows if r["error"])
    if failed:
        print(f"{failed} run(s) failed; see the error column of {out / 'runs.csv'}")
    return 0


def cmd_report(args) -> int:
    agg, fits = report(args.in_dir)
    for row in agg:
        print(f"{row['budget']:>8} {row['strategy']:<11} mean={row['mean_return']} "
              f"se={row['std_error']} regret/budget={row['regret_over_budget']}")
    for strategy, fit in fits.items():
        note = " (nonpositive regrets replaced by 1e-9)" if fit.substituted else ""
        print(f"{strategy}: log-log regret slope {fit.slope:.3f}, "
              f"R/budget decreasing: {fit.ratio_decreasing}{note}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfhrl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one run for a single strategy, budget and seed")
    p.add_argument("--config", help="key-value config file (defaults to the desk setup)")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--budget", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="budget x strategy x seed cross product")
    p.add_argument("--config")
    p.add_argument("--budgets", help="comma-separated budgets (default 0.25, 0.6, 1.0 of budget_max)")
    p.add_argument("--strategies", type=_strategies)
    p.add_argument("--seeds", type=int, help="use seeds 0..n-1")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="recompute aggregates and regret slopes from runs.csv")
    p.add_argument("--in", dest="in_dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
