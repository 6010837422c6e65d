"""Multi-fidelity regret, bound diagnostics, LSVI-UCB and sublinearity fits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .fidelity import FidelityFamily
from .mdp import TabularMdp, value_iteration

FLOAT_FMT = "{:.9g}"


@dataclass
class RoundRecord:
    round: int
    fidelity: int
    cost: float
    return_sim: float  # exact return of the round's policy in M_{k_r}
    return_true: float  # exact return of the round's policy in M
    gain: float
    beta: float
    return_mixture: float = float("nan")  # posterior-weighted member returns in M


@dataclass
class RegretReport:
    total_regret: float
    g_star: float
    gamma_low: float
    alpha_gamma: float
    c_const: float
    per_round: List[float]  # N_e * E[V_{k_r}^{pi_r}] for each round
    optimal_term: float  # N_e * (Gamma / lambda_K) * E[V*]

    def recompute(self) -> float:
        return self.optimal_term - math.fsum(self.per_round)


def multi_fidelity_regret(records: Sequence[RoundRecord], family: FidelityFamily, g_star: float,
                          n_episodes: int, budget: float) -> RegretReport:
    """R = N_e [ (Gamma / lambda_K) E[V*] - sum_r E[V_{k_r}^{pi_r}] ].

    ``g_star`` is the per-episode optimum E_{s0}[V*(s0)] in the true environment.
    """
    if not records:
        raise ValueError("no round records")
    for rec in records:
        if rec.cost != family.cost(rec.fidelity):
            raise ValueError(f"round {rec.round}: cost does not match fidelity {rec.fidelity}")
        if not (math.isfinite(rec.return_sim) and math.isfinite(rec.return_true)):
            raise ValueError(f"round {rec.round}: non-finite return")
    lam_K = family.cost(family.K)
    optimal = n_episodes * budget / lam_K * g_star
    per_round = [n_episodes * rec.return_sim for rec in records]
    # warm-up and fixed-schedule rounds carry no gain estimate (NaN) and are skipped
    gamma_low = math.fsum(rec.gain for rec in records
                          if rec.fidelity != family.K and not math.isnan(rec.gain))
    betas = [rec.beta for rec in records if rec.beta > 0]
    alpha = max(1.0 / b for b in betas) if betas else float("nan")
    return RegretReport(
        total_regret=optimal - math.fsum(per_round),
        g_star=g_star,
        gamma_low=gamma_low,
        alpha_gamma=alpha,
        c_const=n_episodes * g_star / lam_K,
        per_round=per_round,
        optimal_term=optimal,
    )


def write_regret_csv(path, records: Sequence[RoundRecord], report: RegretReport,
                     budget: float, n_episodes: int) -> None:
    fmt = FLOAT_FMT.format
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "round", "fidelity", "cost", "return_sim", "return_true",
                    "return_mixture", "gain", "beta"])
        for rec in records:
            w.writerow(["round", rec.round, rec.fidelity, fmt(rec.cost), fmt(rec.return_sim),
                        fmt(rec.return_true), fmt(rec.return_mixture), fmt(rec.gain),
                        fmt(rec.beta)])
        w.writerow(["summary_header", "budget", "n_episodes", "total_regret", "gamma_low",
                    "alpha_gamma", "c_const", "g_star", ""])
        w.writerow(["summary", fmt(budget), n_episodes, fmt(report.total_regret),
                    fmt(report.gamma_low), fmt(report.alpha_gamma), fmt(report.c_const),
                    fmt(report.g_star), ""])


# ---------------------------------------------------------------------------
# LSVI-UCB
# ---------------------------------------------------------------------------


@dataclass
class LsviConfig:
    episodes: int = 500
    ridge: float = 1.0
    bonus_scale: Optional[float] = None  # None: c * d * H * sqrt(log(2 d T / delta))
    c: float = 1.0
    delta: float = 0.1
    feature_dim: Optional[int] = None

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be positive")
        if self.ridge < 1e-6:
            raise ValueError("ridge must be at least 1e-6")
        if self.bonus_scale is not None and self.bonus_scale < 0:
            raise ValueError("bonus_scale must be nonnegative")

    def beta(self, d: int, horizon: int) -> float:
        if self.bonus_scale is not None:
            return self.bonus_scale
        T = self.episodes * horizon
        return self.c * d * horizon * math.sqrt(math.log(2 * d * T / self.delta))


@dataclass
class LsviResult:
    policies: List[np.ndarray]  # per episode, (H+1, S) greedy actions
    regret: np.ndarray  # per-episode expected regret
    min_eig: float  # smallest eigenvalue over all design matrices at the end
    visited_ok: bool
    final_return: float
    optimal_return: float
    greedy_actions: np.ndarray  # (H+1, S) greedy in the final estimates without the bonus
    greedy_return: float
    designs: np.ndarray  # (H+1, d, d) design matrices after the last episode
    quad: np.ndarray  # (H+1, S*A) incrementally maintained phi^T Lambda^{-1} phi

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.regret)


def one_hot_features(num_states: int, num_actions: int) -> np.ndarray:
    return np.eye(num_states * num_actions)


def ucb_bonus(phi: np.ndarray, design: np.ndarray, beta: float) -> np.ndarray:
    """beta * sqrt(phi^T Lambda^{-1} phi) for every feature row, by a direct solve."""
    quad = np.einsum("ij,ji->i", phi, np.linalg.solve(design, phi.T))
    return beta * np.sqrt(np.maximum(quad, 0.0))


def nonstationary_return(mdp: TabularMdp, actions: np.ndarray) -> float:
    """Exact return of a time-indexed deterministic policy ``actions[t, s]``."""
    S = mdp.num_states
    v = np.zeros(S)
    for t in range(mdp.horizon, -1, -1):
        a = actions[t]
        v = mdp.reward[np.arange(S), a] + mdp.gamma * mdp.transition[np.arange(S), a] @ v
    return float(mdp.init_dist @ v)


def lsvi_ucb(mdp: TabularMdp, cfg: LsviConfig, rng: np.random.Generator,
             features: Optional[np.ndarray] = None) -> LsviResult:
    """Least-squares value iteration with an elliptical UCB bonus, one design per step.

    ``features`` maps each (s, a) (row ``s * A + a``) to a d-vector; defaults to the
    one-hot embedding, under which the tabular MDP is exactly linear.
    """
    S, A = mdp.num_states, mdp.num_actions
    steps = mdp.horizon + 1
    phi = one_hot_features(S, A) if features is None else np.asarray(features, dtype=float)
    d = phi.shape[1]
    if phi.shape[0] != S * A:
        raise ValueError("need one feature row per (s, a)")
    if cfg.feature_dim is not None and cfg.feature_dim != d:
        raise ValueError(f"feature_dim {cfg.feature_dim} != {d}")
    beta = cfg.beta(d, steps)

    design = np.repeat(np.eye(d)[None] * cfg.ridge, steps, axis=0)
    design_inv = np.repeat(np.eye(d)[None] / cfg.ridge, steps, axis=0)
    # quadratic form phi(s,a)^T Lambda_h^{-1} phi(s,a) for every (s, a), maintained incrementally
    quad = np.repeat((phi * phi).sum(axis=1)[None] / cfg.ridge, steps, axis=0)
    counts = np.zeros((steps, S * A, S))
    reward_sums = np.zeros((steps, S * A))

    caps = np.array([sum(mdp.gamma ** j for j in range(steps - h)) for h in range(steps)])
    v_opt = value_iteration(mdp)[0]
    optimal = float(mdp.init_dist @ v_opt)

    trans_cdf = np.cumsum(mdp.transition, axis=-1)
    trans_cdf /= trans_cdf[..., -1:]
    init_cdf = np.cumsum(mdp.init_dist)
    init_cdf /= init_cdf[-1]

    policies, regret = [], np.zeros(cfg.episodes)
    visited_ok = True
    for ep in range(cfg.episodes):
        actions = np.zeros((steps, S), dtype=np.int64)
        v_next = np.zeros(S)
        for h in range(steps - 1, -1, -1):
            targets = reward_sums[h] + counts[h] @ (mdp.gamma * v_next)
            w = design_inv[h] @ (phi.T @ targets)
            q = (phi @ w + beta * np.sqrt(np.maximum(quad[h], 0.0))).reshape(S, A)
            # choose on the untruncated estimate: truncation makes every well-explored
            # and unexplored action tie at the cap, and the tie-break would then pin
            # the agent to action 0
            actions[h] = q.argmax(axis=1)
            v_next = np.minimum(q, caps[h]).max(axis=1)
        policies.append(actions)
        regret[ep] = optimal - nonstationary_return(mdp, actions)

        s = int(np.searchsorted(init_cdf, rng.random(), side="right"))
        for h in range(steps):
            a = int(actions[h, s])
            s2 = int(np.searchsorted(trans_cdf[s, a], rng.random(), side="right"))
            s2 = min(s2, S - 1)
            i = s * A + a
            visited_ok &= 0 <= s < S and 0 <= a < A
            counts[h, i, s2] += 1
            reward_sums[h, i] += mdp.reward[s, a]
            f = phi[i]
            design[h] += np.outer(f, f)
            u = design_inv[h] @ f
            denom = 1.0 + f @ u
            design_inv[h] -= np.outer(u, u) / denom
            quad[h] -= (phi @ u) ** 2 / denom
            s = s2

    greedy = np.zeros((steps, S), dtype=np.int64)
    v_next = np.zeros(S)
    for h in range(steps - 1, -1, -1):
        targets = reward_sums[h] + counts[h] @ (mdp.gamma * v_next)
        q = (phi @ (design_inv[h] @ (phi.T @ targets))).reshape(S, A)
        greedy[h] = q.argmax(axis=1)
        v_next = np.minimum(q, caps[h]).max(axis=1)

    min_eig = float(min(np.linalg.eigvalsh(m).min() for m in design))
    return LsviResult(policies, regret, min_eig, bool(visited_ok),
                      nonstationary_return(mdp, policies[-1]), optimal, greedy,
                      nonstationary_return(mdp, greedy), design, quad)


# ---------------------------------------------------------------------------
# Sublinearity
# ---------------------------------------------------------------------------


@dataclass
class SublinearityFit:
    slope: float
    ratio_decreasing: bool  # R/Gamma strictly falls between consecutive budgets
    substituted: bool  # some R <= 0 was replaced by eps


def sublinearity_fit(points: Sequence[Tuple[float, float]], eps: float = 1e-9) -> SublinearityFit:
    """Least-squares slope of log R against log Gamma."""
    if len(points) < 3:
        raise ValueError("need at least three (budget, regret) points")
    budgets = np.array([p[0] for p in points], dtype=float)
    regrets = np.array([p[1] for p in points], dtype=float)
    if np.any(np.diff(budgets) <= 0):
        raise ValueError("budgets must be strictly increasing")
    substituted = bool(np.any(regrets <= 0))
    regrets = np.where(regrets <= 0, eps, regrets)
    slope = float(np.polyfit(np.log(budgets), np.log(regrets), 1)[0])
    ratio = regrets / budgets
    return SublinearityFit(slope, bool(np.all(np.diff(ratio) < 0)), substituted)
