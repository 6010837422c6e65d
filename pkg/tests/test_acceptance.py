"""Acceptance criteria, each printing one PASS/FAIL line.

The sweep-based criteria share cached runs; the whole module takes several minutes
on one core.
"""

import math
from functools import lru_cache

import numpy as np
import pytest

from mfhrl.config import ExperimentConfig
from mfhrl.ensemble import CqlConfig, draw_masks, train_cql
from mfhrl.envs import gridworld, random_mdp
from mfhrl.experiment import run
from mfhrl.fidelity import build_family, generate_offline, mixture_behavior
from mfhrl.hybrid import (RatioConfig, discriminator_ratio, exact_ratio, fit_discriminators,
                          h2o_loss_grad, ratio_from_posteriors)
from mfhrl.mdp import rollout, uniform_policy, value_iteration
from mfhrl.regret import LsviConfig, lsvi_ucb, sublinearity_fit
from mfhrl.selector import PosteriorBelief, entropy, information_gain, posterior_update

pytestmark = pytest.mark.acceptance

CFG = ExperimentConfig()
SEEDS = range(20)
STRATEGIES = ("mf-hrl-igm", "uniform", "lowest", "highest")
LOW, HIGH = 0.25 * CFG.run.budget_max, CFG.run.budget_max
REGRET_BUDGETS = (250.0, 500.0, 1000.0, 2000.0)


@lru_cache(maxsize=None)
def cached_run(strategy, budget, seed):
    return run(CFG, seed, strategy, budget)


def returns(strategy, budget):
    vals = np.array([cached_run(strategy, budget, s).final_return for s in SEEDS])
    return vals.mean(), vals.std(ddof=1) / math.sqrt(vals.size)


def pooled(a, b):
    return math.hypot(a[1], b[1])


def summary(stats):
    return ", ".join(f"{k} {m:.3f}±{se:.3f}" for k, (m, se) in stats.items())


def test_criterion_1_low_budget_ordering(verdict):
    stats = {s: returns(s, LOW) for s in STRATEGIES}
    mf, uni = stats["mf-hrl-igm"], stats["uniform"]
    ok = (mf[0] - uni[0] >= pooled(mf, uni)
          and all(uni[0] - stats[b][0] >= pooled(uni, stats[b]) for b in ("lowest", "highest")))
    verdict(1, ok, f"budget {LOW:g}, 20 seeds: {summary(stats)}")
    assert ok


def test_criterion_2_high_budget_convergence(verdict):
    stats = {s: returns(s, HIGH) for s in STRATEGIES}
    mf = stats["mf-hrl-igm"]
    ok = (all(mf[0] >= stats[b][0] - pooled(mf, stats[b]) for b in STRATEGIES[1:])
          and abs(stats["uniform"][0] - mf[0]) <= 0.05 * mf[0])
    verdict(2, ok, f"budget {HIGH:g}, 20 seeds: {summary(stats)}")
    assert ok


def test_criterion_3_no_regret_trend(verdict):
    mean_regret = [np.mean([cached_run("mf-hrl-igm", b, s).report.total_regret for s in SEEDS])
                   for b in REGRET_BUDGETS]
    ratios = np.array(mean_regret) / np.array(REGRET_BUDGETS)
    fit = sublinearity_fit(list(zip(REGRET_BUDGETS, mean_regret)))
    ok = bool(np.all(np.diff(ratios) <= 0)) and fit.slope <= 0.85 and not fit.substituted
    verdict(3, ok, "R/budget " + ", ".join(f"{r:.4f}" for r in ratios) + f"; slope {fit.slope:.3f}")
    assert ok


def test_criterion_4_lsvi_ucb(verdict):
    mdp = gridworld()
    cfg = LsviConfig(episodes=500, bonus_scale=0.5, ridge=1e-6)
    curves, gaps = [], []
    for seed in range(10):
        res = lsvi_ucb(mdp, cfg, np.random.default_rng(seed))
        curves.append(res.cumulative)
        gaps.append(res.optimal_return - res.greedy_return)
    mean_curve = np.mean(curves, axis=0)
    T = np.arange(1, cfg.episodes + 1)
    slope = float(np.polyfit(np.log(T), np.log(mean_curve), 1)[0])
    reached = sum(g <= 1e-9 for g in gaps)
    ok = 0 < slope < 0.8 and reached == len(gaps)
    verdict(4, ok, f"slope {slope:.3f}; greedy policy optimal in {reached}/10 seeds "
                   f"(largest return gap {max(gaps):.4f})")
    assert ok


def test_criterion_5_ratio_oracle(verdict):
    # five states, two actions and slip 0.4 keep every reachable (s, a, s') frequent
    # enough that 1e5 transitions pin each ratio down to a few percent
    base = random_mdp(np.random.default_rng(2), 5, 2, slip=0.4)
    fam = build_family(base, [2.0, 1.0], [1, 2])
    rng = np.random.default_rng(0)
    episodes = -(-100_000 // base.episode_length)
    real = rollout(fam.truth, uniform_policy(5, 2), episodes, rng)
    sim = rollout(fam.simulator(1), uniform_policy(5, 2), episodes, rng, fidelity=1)
    cfg = RatioConfig()
    counts = fit_discriminators(real, sim, cfg.smoothing, 5, 2)
    s, a, s2 = np.nonzero(fam.simulator(1).transition > 0)
    exact = exact_ratio(fam, 1, s, a, s2, RatioConfig(clip_low=1e-9, clip_high=1e9))
    unclipped = (exact >= cfg.clip_low) & (exact <= cfg.clip_high)
    est = discriminator_ratio(counts, s, a, s2, cfg)
    rel = np.abs(est - exact)[unclipped] / exact[unclipped]
    p_m, p_k = fam.truth.transition[s, a, s2], fam.simulator(1).transition[s, a, s2]
    ident = ratio_from_posteriors(p_m / (p_m + p_k), np.full(s.size, 0.5))
    ident_err = float(np.max(np.abs(ident - exact)))
    ok = rel.max() <= 0.10 and ident_err <= 1e-12
    verdict(5, ok, f"{real.size} real / {sim.size} sim transitions, max relative error "
                   f"{rel.max():.4f} over {unclipped.sum()} triples; identity error {ident_err:.1e}")
    assert ok


def test_criterion_6_posterior_properties(verdict):
    rng = np.random.default_rng(0)
    worst = {"norm": 0.0, "assoc": 0.0, "shift": 0.0}
    bounds_ok = True
    for _ in range(500):
        L = int(rng.integers(2, 7))
        p = PosteriorBelief(rng.dirichlet(np.ones(L)))
        a, b = rng.normal(scale=3, size=L), rng.normal(scale=3, size=L)
        q = posterior_update(p, a)
        worst["norm"] = max(worst["norm"], abs(q.probs.sum() - 1))
        bounds_ok &= bool(np.all(q.probs >= 0))
        joint = posterior_update(p, a + b).probs
        worst["assoc"] = max(worst["assoc"], np.abs(posterior_update(q, b).probs - joint).max())
        worst["shift"] = max(worst["shift"], np.abs(posterior_update(p, a + 7.5).probs - q.probs).max())
        members = list(range(L))
        table = rng.normal(scale=2, size=(L, 3))
        batches = list(range(3))
        gain = information_gain(p, batches, members, 1.0, lambda m, j: table[m, j])
        bounds_ok &= 0 <= gain <= entropy(p) + 1e-12 and entropy(p) <= math.log(L) + 1e-12
    example = information_gain(PosteriorBelief.uniform(2), [0], [0, 1], 1.0,
                               lambda m, j: [0.0, math.log(2)][m])
    ok = (worst["norm"] <= 1e-12 and worst["assoc"] <= 1e-12 and worst["shift"] <= 1e-12
          and bounds_ok and abs(example - 0.056633) <= 1e-6)
    verdict(6, ok, f"500 instances, normalization {worst['norm']:.1e}, associativity "
                   f"{worst['assoc']:.1e}, shift {worst['shift']:.1e}, bounds {bounds_ok}, "
                   f"example {example:.6f}")
    assert ok


def _h2o_total(q, pi, off, sim, ratios, omega, alpha, gamma):
    z = np.log(np.sum(omega * np.exp(q)))
    v = (pi * q).sum(1)
    res_off = q[off.s, off.a] - off.r - gamma * v[off.s_next]
    res_sim = q[sim.s, sim.a] - sim.r - gamma * v[sim.s_next]
    return alpha * (z - q[off.s, off.a].mean()) + np.mean(res_off ** 2) + np.mean(ratios * res_sim ** 2)


def test_criterion_7_gradient_check(verdict):
    from mfhrl.mdp import Batch
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        S, A = int(rng.integers(2, 6)), int(rng.integers(2, 4))
        def batch(n):
            return Batch(rng.integers(0, S, n), rng.integers(0, A, n), rng.random(n), rng.integers(0, S, n))
        off, sim = batch(int(rng.integers(1, 12))), batch(int(rng.integers(1, 12)))
        q = rng.normal(size=(S, A))
        pi = rng.dirichlet(np.ones(A), size=S)
        omega = rng.random((S, A)) * (rng.random((S, A)) < 0.8)
        omega[0, 0] += 0.1
        omega /= omega.sum()
        ratios = rng.uniform(0.01, 10, sim.size)
        alpha, gamma = float(rng.uniform(0, 5)), float(rng.uniform(0.5, 0.99))
        grad = h2o_loss_grad(q, pi, off, sim, ratios, omega, alpha, gamma)
        for idx in np.ndindex(S, A):
            qp, qm = q.copy(), q.copy()
            qp[idx] += 1e-5
            qm[idx] -= 1e-5
            fd = (_h2o_total(qp, pi, off, sim, ratios, omega, alpha, gamma)
                  - _h2o_total(qm, pi, off, sim, ratios, omega, alpha, gamma)) / 2e-5
            worst = max(worst, abs(grad[idx] - fd) / max(1.0, abs(fd)))
    ok = worst <= 1e-4
    verdict(7, ok, f"100 random instances, worst relative error {worst:.2e}")
    assert ok


def test_criterion_8_conservatism(verdict):
    fam = build_family(gridworld(), CFG.family.factors, CFG.family.costs)
    pi = value_iteration(fam.truth)[2]
    diffs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        data = generate_offline(fam, mixture_behavior(pi, 4, 0.5), CFG.run.offline_size, rng)
        mask = draw_masks(len(data), CFG.run.ensemble_size, rng)[0]
        visited = data.batch.select(mask.bits).sa_counts(25, 4) > 0
        means = [train_cql(data, mask, CqlConfig(alpha_c=alpha), 25, 4, fam.truth.gamma).q[visited].mean()
                 for alpha in (5.0, 0.0)]
        diffs.append(means[0] - means[1])
    ok = all(d < 0 for d in diffs)
    verdict(8, ok, f"mean Q(alpha 5) - mean Q(alpha 0) over 10 seeds: max {max(diffs):.4f}, "
                   f"mean {np.mean(diffs):.4f}")
    assert ok


def test_criterion_9_budget_audit(verdict):
    cells = ([(s, b) for s in STRATEGIES for b in (LOW, HIGH)]
             + [("mf-hrl-igm", b) for b in REGRET_BUDGETS])
    results = [cached_run(s, b, seed) for s, b in set(cells) for seed in SEEDS]
    violations = sum(
        1 for r in results
        if not (r.audit_ok and math.fsum(c for _, _, c in r.ledger.history) == r.ledger.spent
                and r.ledger.spent <= r.budget))
    ok = violations == 0
    verdict(9, ok, f"{len(results)} runs replayed, {violations} violations")
    assert ok


def test_criterion_10_bootstrap_statistics(verdict):
    masks = draw_masks(10_000, 3, np.random.default_rng(0))
    means = [m.bits.mean() for m in masks]
    bits = np.stack([m.bits for m in masks]).astype(float)
    corr = np.corrcoef(bits)[np.triu_indices(3, 1)]
    sigma = math.sqrt(0.25 / 10_000)
    ok = all(abs(m - 0.5) <= 3 * sigma for m in means) and np.all(np.abs(corr) <= 0.03)
    verdict(10, ok, "inclusion " + ", ".join(f"{m:.4f}" for m in means)
            + " (bound ±0.015); correlations " + ", ".join(f"{c:+.4f}" for c in corr))
    assert ok
