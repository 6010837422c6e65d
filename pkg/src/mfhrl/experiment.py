"""Experiment orchestration: the adaptive-fidelity loop, fixed baselines and sweeps."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from .config import ExperimentConfig, STRATEGIES, save_config
from .ensemble import EnsembleMember, cql_term, train_ensemble
from .fidelity import (BudgetLedger, FidelityFamily, InsufficientBudget, build_family, charge,
                       generate_offline, mixture_behavior, threshold)
from .fidelity import kl_gap
from .hybrid import (DiscriminatorCounts, discriminator_ratio, exact_ratio, h2o_update,
                     omega_weights, plug_in_kl)
from .mdp import Batch, expected_return, rollout, uniform_policy, value_iteration
from .regret import (FLOAT_FMT, RegretReport, RoundRecord, multi_fidelity_regret,
                     sublinearity_fit, write_regret_csv)
from .selector import (BudgetExhausted, HistoryBuffer, PosteriorBelief, entropy,
                       information_gain, map_policy, posterior_update, select_fidelity)

log = logging.getLogger(__name__)
fmt = FLOAT_FMT.format


@dataclass
class RunResult:
    strategy: str
    seed: int
    budget: float
    final_return: float
    optimal_return: float
    records: List[RoundRecord]
    report: Optional[RegretReport]
    selector_log: List[dict]
    ledger: BudgetLedger
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def audit_ok(self) -> bool:
        return self.ledger.audit() and all(
            c == r.cost for (_, _, c), r in zip(self.ledger.history, self.records))

    @property
    def fidelity_counts(self) -> Dict[int, int]:
        counts: Dict[int, int] = {}
        for r in self.records:
            counts[r.fidelity] = counts.get(r.fidelity, 0) + 1
        return counts


class _Setup:
    """Everything a run shares across rounds, built deterministically from the seed."""

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        data_rng, member_rng, self.rollout_rng = np.random.default_rng(seed).spawn(3)
        base = cfg.env.build()
        self.family: FidelityFamily = build_family(base, cfg.family.factors, cfg.family.costs)
        truth = self.family.truth
        self.S, self.A, self.gamma = truth.num_states, truth.num_actions, truth.gamma
        v_star, _, pi_star = value_iteration(truth)
        self.g_star = float(truth.init_dist @ v_star)
        behavior = mixture_behavior(pi_star, self.A, cfg.run.behavior_weight)
        self.offline = generate_offline(self.family, behavior, cfg.run.offline_size, data_rng)
        self.members = train_ensemble(self.offline, cfg.offline, cfg.run.ensemble_size,
                                      self.S, self.A, self.gamma, member_rng)
        self.member_offline = [self.offline.batch.select(m.mask.bits) for m in self.members]
        empty = np.zeros((self.S, self.A))
        empty3 = np.zeros((self.S, self.A, self.S))
        off = self.offline.batch
        self.counts = {
            k: DiscriminatorCounts(off.sa_counts(self.S, self.A), empty.copy(),
                                   off.sas_counts(self.S, self.A), empty3.copy(),
                                   cfg.ratio.smoothing)
            for k in range(1, self.family.K + 1)
        }

    def ratios(self, batch: Batch) -> np.ndarray:
        k = batch.fidelity
        if self.cfg.ratio.mode == "exact-oracle":
            return exact_ratio(self.family, k, batch.s, batch.a, batch.s_next, self.cfg.ratio)
        return discriminator_ratio(self.counts[k], batch.s, batch.a, batch.s_next, self.cfg.ratio)

    def omega(self, k: int) -> np.ndarray:
        c = self.counts[k]
        visited = (c.real_sa > 0) | (c.sim_sa > 0)
        if self.cfg.ratio.mode == "exact-oracle":
            return omega_weights(kl_gap(self.family, k), visited)
        return omega_weights(plug_in_kl(c), visited)


class _Losses:
    """Per-round loss evaluator; offline parts are computed lazily and cached."""

    def __init__(self, setup: _Setup, members: Sequence[EnsembleMember]):
        self.setup = setup
        self.alpha_c = setup.cfg.online.alpha_c
        self._bellman = {m.index: float(np.mean(_residuals(m, setup.offline.batch, setup.gamma) ** 2))
                         for m in members}
        self._offline: Dict[tuple, float] = {}
        self._omega: Dict[int, np.ndarray] = {}
        self._ratio_cache: Dict[int, np.ndarray] = {}

    def offline_part(self, member: EnsembleMember, k: int) -> float:
        key = (member.index, k)
        if key not in self._offline:
            if k not in self._omega:
                self._omega[k] = self.setup.omega(k)
            self._offline[key] = (cql_term(member.q, self._omega[k], self.setup.offline.batch,
                                           self.alpha_c) + self._bellman[member.index])
        return self._offline[key]

    def __call__(self, member: EnsembleMember, batch: Batch) -> float:
        key = id(batch)
        if key not in self._ratio_cache:
            self._ratio_cache[key] = self.setup.ratios(batch)
        ratios = self._ratio_cache[key]
        res = _residuals(member, batch, self.setup.gamma)
        return self.offline_part(member, batch.fidelity) + float(np.mean(ratios * res ** 2))


def _residuals(member: EnsembleMember, batch: Batch, gamma: float) -> np.ndarray:
    next_v = (member.policy * member.q).sum(axis=1)
    return member.q[batch.s, batch.a] - batch.r - gamma * next_v[batch.s_next]


def _uniform_schedule(family: FidelityFamily, budget: float) -> List[int]:
    """Equal cost shares per level, spent in increasing fidelity; remainders stay unspent."""
    share = budget / family.K
    schedule = []
    for k in range(1, family.K + 1):
        schedule += [k] * int(math.floor(share / family.cost(k) + 1e-12))
    return schedule


def run(cfg: ExperimentConfig, seed: int, strategy: Optional[str] = None,
        budget: Optional[float] = None) -> RunResult:
    """One complete offline + online run under ``strategy`` (default ``cfg.run.strategy``)."""
    strategy = strategy or cfg.run.strategy
    budget = cfg.run.budget if budget is None else budget
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    start = time.perf_counter()
    setup = _Setup(cfg, seed)
    family, K = setup.family, setup.family.K
    members = setup.members
    posterior = PosteriorBelief.uniform(len(members))
    ledger = BudgetLedger(budget)
    history = HistoryBuffer(K, cfg.selector.buffer_size)
    losses = _Losses(setup, members)
    eps = cfg.run.exploration
    n_eps = cfg.run.episodes_per_round
    uniform = uniform_policy(setup.S, setup.A)

    if strategy == "uniform":
        planned: Iterator[int] = iter(_uniform_schedule(family, budget))
    warmup = list(range(1, K + 1)) if (strategy == "mf-hrl-igm" and cfg.selector.warmup) else []

    records: List[RoundRecord] = []
    selector_log: List[dict] = []
    r = 0
    while True:
        r += 1
        gains = np.full(K, np.nan)
        try:
            if ledger.remaining <= 0:
                raise BudgetExhausted("budget spent")
            beta = threshold(ledger)
            if strategy == "lowest":
                k = 1
            elif strategy == "highest":
                k = K
            elif strategy == "uniform":
                k = next(planned, None)
                if k is None:
                    raise BudgetExhausted("uniform schedule complete")
            elif warmup:
                k = warmup.pop(0)
            else:
                gains = np.array([information_gain(posterior, history[j], members,
                                                   cfg.selector.eta, losses)
                                  for j in range(1, K + 1)])
                k = select_fidelity(gains, family, ledger)
            charge(ledger, r, k, family)
        except (BudgetExhausted, InsufficientBudget):
            break

        pi_r = map_policy(posterior, members)
        behaviour = (1 - eps) * pi_r + eps * uniform
        batch = rollout(family.simulator(k), behaviour, n_eps, setup.rollout_rng,
                        fidelity=k, round=r)
        setup.counts[k].add_sim(batch)
        history.add(batch)

        ratios = setup.ratios(batch)
        omega = setup.omega(k)
        members = [h2o_update(m, off, batch, family, k, cfg.online, cfg.ratio,
                              weights=(ratios, omega))
                   for m, off in zip(members, setup.member_offline)]
        losses = _Losses(setup, members)
        fresh = [losses(m, batch) for m in members]
        posterior = posterior_update(posterior, fresh, cfg.selector.eta)

        truth_returns = [expected_return(family.truth, m.policy) for m in members]
        records.append(RoundRecord(
            round=r, fidelity=k, cost=family.cost(k),
            return_sim=expected_return(family.simulator(k), pi_r),
            return_true=expected_return(family.truth, pi_r),
            gain=float(gains[k - 1]),
            beta=beta,
            return_mixture=float(np.dot(posterior.probs, truth_returns)),
        ))
        selector_log.append({"round": r, "entropy": entropy(posterior), "gains": gains,
                             "beta": beta, "chosen_k": k, "remaining": ledger.remaining})

    final = expected_return(family.truth, map_policy(posterior, members))
    report = (multi_fidelity_regret(records, family, setup.g_star, n_eps, budget)
              if records else None)
    result = RunResult(strategy, seed, budget, final, setup.g_star, records, report,
                       selector_log, ledger, time.perf_counter() - start)
    if not result.audit_ok:
        raise RuntimeError(f"budget audit failed for {strategy} seed {seed}")
    if report is not None and report.alpha_gamma > math.sqrt(budget) * (1 + 1e-12):
        raise RuntimeError(f"alpha(budget) exceeds sqrt(budget) for {strategy} seed {seed}")
    return result


def run_mf_hrl_igm(cfg: ExperimentConfig, seed: int, budget: Optional[float] = None) -> RunResult:
    return run(cfg, seed, "mf-hrl-igm", budget)


def run_baseline(cfg: ExperimentConfig, seed: int, strategy: Optional[str] = None,
                 budget: Optional[float] = None) -> RunResult:
    strategy = strategy or cfg.run.strategy
    if strategy not in ("lowest", "highest", "uniform"):
        raise ValueError(f"{strategy!r} is not a baseline")
    return run(cfg, seed, strategy, budget)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

RUN_FIELDS = ["budget", "strategy", "seed", "final_return", "optimal_return", "total_regret",
              "gamma_low", "alpha_gamma", "rounds", "spent", "audit_ok", "fidelity_counts",
              "error"]
AGG_FIELDS = ["budget", "strategy", "mean_return", "std_error", "n_seeds", "mean_regret",
              "regret_over_budget"]


def run_row(res: RunResult) -> dict:
    rep = res.report
    counts = res.fidelity_counts
    return {
        "budget": fmt(res.budget), "strategy": res.strategy, "seed": res.seed,
        "final_return": fmt(res.final_return), "optimal_return": fmt(res.optimal_return),
        "total_regret": fmt(rep.total_regret) if rep else "",
        "gamma_low": fmt(rep.gamma_low) if rep else "",
        "alpha_gamma": fmt(rep.alpha_gamma) if rep else "",
        "rounds": len(res.records), "spent": fmt(res.ledger.spent),
        "audit_ok": res.audit_ok,
        "fidelity_counts": " ".join(f"{k}:{counts.get(k, 0)}" for k in sorted(counts)),
        "error": "",
    }


def write_selector_log(path, res: RunResult, K: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "entropy"] + [f"gain_{k}" for k in range(1, K + 1)]
                   + ["beta_r", "chosen_k", "remaining_budget"])
        for row in res.selector_log:
            w.writerow([row["round"], fmt(row["entropy"])] + [fmt(g) for g in row["gains"]]
                       + [fmt(row["beta"]), row["chosen_k"], fmt(row["remaining"])])


def write_run(out_dir, res: RunResult, cfg: ExperimentConfig) -> Path:
    """Per-run CSV, selector log and regret CSV in ``out_dir``."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "run.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, RUN_FIELDS)
        w.writeheader()
        w.writerow(run_row(res))
    write_selector_log(d / "selector.csv", res, len(cfg.family.costs))
    if res.report is not None:
        write_regret_csv(d / "regret.csv", res.records, res.report, res.budget,
                         cfg.run.episodes_per_round)
    return d


def _cell_dir(out: Path, strategy: str, budget: float, seed: int) -> Path:
    return out / "runs" / f"{strategy}_b{fmt(budget)}_s{seed}"


def aggregate(rows: Sequence[dict]) -> List[dict]:
    """Mean return, standard error and mean regret per (budget, strategy) cell."""
    cells: Dict[tuple, List[dict]] = {}
    for row in rows:
        if row.get("error"):
            continue
        cells.setdefault((float(row["budget"]), row["strategy"]), []).append(row)
    out = []
    for (budget, strategy), group in sorted(cells.items(), key=lambda kv: (kv[0][0], STRATEGIES.index(kv[0][1]))):
        rets = np.array([float(g["final_return"]) for g in group])
        regs = np.array([float(g["total_regret"]) for g in group if g["total_regret"] != ""])
        se = float(rets.std(ddof=1) / math.sqrt(len(rets))) if len(rets) > 1 else float("nan")
        mean_reg = float(regs.mean()) if regs.size else float("nan")
        out.append({"budget": fmt(budget), "strategy": strategy, "mean_return": fmt(rets.mean()),
                    "std_error": fmt(se), "n_seeds": len(rets), "mean_regret": fmt(mean_reg),
                    "regret_over_budget": fmt(mean_reg / budget)})
    return out


def regret_slopes(agg_rows: Sequence[dict]) -> Dict[str, object]:
    fits = {}
    for strategy in STRATEGIES:
        pts = [(float(r["budget"]), float(r["mean_regret"])) for r in agg_rows
               if r["strategy"] == strategy and r["mean_regret"] != "nan"]
        pts.sort()
        if len(pts) >= 3:
            fits[strategy] = sublinearity_fit(pts)
    return fits


def _write_csv(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fields)
        w.writeheader()
        w.writerows(rows)


def run_sweep(cfg: ExperimentConfig, budgets: Sequence[float], strategies: Sequence[str],
              seeds: Sequence[int], out_dir=None, write_runs: bool = True):
    """Full (budget x strategy x seed) cross product.

    Returns ``(run_rows, aggregate_rows, results)``; failures are recorded in the
    ``error`` column and the sweep continues.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.txt")
    rows, results = [], []
    for budget in budgets:
        for strategy in strategies:
            for seed in seeds:
                try:
                    res = run(cfg, seed, strategy, budget)
                except Exception as exc:  # recorded per cell
                    log.exception("run failed: %s budget=%s seed=%s", strategy, budget, seed)
                    row = {f: "" for f in RUN_FIELDS}
                    row.update(budget=fmt(budget), strategy=strategy, seed=seed,
                               error=f"{type(exc).__name__}: {exc}")
                    rows.append(row)
                    continue
                results.append(res)
                rows.append(run_row(res))
                if out is not None and write_runs:
                    d = _cell_dir(out, strategy, budget, seed)
                    d.mkdir(parents=True, exist_ok=True)
                    write_selector_log(d / "selector.csv", res, len(cfg.family.costs))
                    if res.report is not None:
                        write_regret_csv(d / "regret.csv", res.records, res.report, budget,
                                         cfg.run.episodes_per_round)
    agg = aggregate(rows)
    if out is not None:
        _write_csv(out / "runs.csv", RUN_FIELDS, rows)
        _write_csv(out / "aggregate.csv", AGG_FIELDS, agg)
        _write_regret_budget(out / "regret_vs_budget.csv", agg)
    return rows, agg, results


def _write_regret_budget(path, agg: Sequence[dict]) -> None:
    _write_csv(path, ["strategy", "budget", "mean_regret", "regret_over_budget"],
               [{k: r[k] for k in ("strategy", "budget", "mean_regret", "regret_over_budget")}
                for r in agg])


def read_runs(in_dir) -> List[dict]:
    with open(Path(in_dir) / "runs.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def report(in_dir) -> tuple:
    """Recompute aggregates and regret slopes from a sweep's per-run CSV."""
    rows = read_runs(in_dir)
    agg = aggregate(rows)
    _write_csv(Path(in_dir) / "aggregate.csv", AGG_FIELDS, agg)
    _write_regret_budget(Path(in_dir) / "regret_vs_budget.csv", agg)
    return agg, regret_slopes(agg)
