"""Hybrid offline/simulator updates: dynamics ratios, KL weights and the combined loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ensemble import (CqlConfig, EnsembleMember, ResidualTerm, check_omega, cql_grad,
                       cql_term, descend)
from .fidelity import FidelityFamily, kl_gap, kl_rows
from .mdp import Batch, greedy_improve

MODES = ("exact-oracle", "discriminator")


@dataclass
class RatioConfig:
    clip_low: float = 0.01
    clip_high: float = 100.0
    mode: str = "discriminator"
    smoothing: float = 1.0

    def __post_init__(self):
        if not 0 < self.clip_low <= 1 <= self.clip_high:
            raise ValueError("need 0 < clip_low <= 1 <= clip_high")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.smoothing <= 0:
            raise ValueError("smoothing must be positive")


@dataclass
class DiscriminatorCounts:
    """Count-based real-vs-simulated classifiers over (s, a) and (s, a, s')."""

    real_sa: np.ndarray
    sim_sa: np.ndarray
    real_sas: np.ndarray
    sim_sas: np.ndarray
    smoothing: float = 1.0

    def __post_init__(self):
        if self.smoothing <= 0:
            raise ValueError("smoothing must be positive")

    def p_real_sa(self) -> np.ndarray:
        a = self.smoothing
        return (self.real_sa + a) / (self.real_sa + self.sim_sa + 2 * a)

    def p_real_sas(self) -> np.ndarray:
        a = self.smoothing
        return (self.real_sas + a) / (self.real_sas + self.sim_sas + 2 * a)

    def add_sim(self, batch: Batch) -> "DiscriminatorCounts":
        S, A = self.real_sa.shape
        self.sim_sa = self.sim_sa + batch.sa_counts(S, A)
        self.sim_sas = self.sim_sas + batch.sas_counts(S, A)
        return self

    def copy(self) -> "DiscriminatorCounts":
        return DiscriminatorCounts(self.real_sa.copy(), self.sim_sa.copy(), self.real_sas.copy(),
                                   self.sim_sas.copy(), self.smoothing)

    def transition_estimates(self):
        """Smoothed empirical P(s'|s,a) for the real and simulated data.

        Pseudo-counts go only to next states observed in either dataset, so two
        identical deterministic rows estimate identically whatever their sample
        sizes. Rows with no data at all come out as zeros.
        """
        a = self.smoothing
        support = (self.real_sas + self.sim_sas) > 0
        width = support.sum(axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            p_real = (self.real_sas + a * support) / (self.real_sa[..., None] + a * width)
            p_sim = (self.sim_sas + a * support) / (self.sim_sa[..., None] + a * width)
        return np.nan_to_num(p_real), np.nan_to_num(p_sim)


def fit_discriminators(real_batch: Batch, sim_batch: Batch, smoothing: float,
                       num_states: int, num_actions: int) -> DiscriminatorCounts:
    if real_batch.size == 0 or sim_batch.size == 0:
        raise ValueError("discriminators need non-empty real and simulated batches")
    S, A = num_states, num_actions
    return DiscriminatorCounts(real_batch.sa_counts(S, A), sim_batch.sa_counts(S, A),
                               real_batch.sas_counts(S, A), sim_batch.sas_counts(S, A),
                               smoothing)


def ratio_from_posteriors(p_sas, p_sa):
    """P(real|s,a,s') (1 - P(real|s,a)) / (P(real|s,a) (1 - P(real|s,a,s')))."""
    p_sas = np.asarray(p_sas, dtype=float)
    p_sa = np.asarray(p_sa, dtype=float)
    return p_sas * (1.0 - p_sa) / (p_sa * (1.0 - p_sas))


def _clip(x, cfg: RatioConfig):
    return np.clip(x, cfg.clip_low, cfg.clip_high)


def discriminator_ratio(counts: DiscriminatorCounts, s, a, s_next, cfg: RatioConfig):
    """Dynamics ratio from the count discriminators; vectorised over index arrays."""
    raw = ratio_from_posteriors(counts.p_real_sas()[s, a, s_next], counts.p_real_sa()[s, a])
    return _clip(raw, cfg)


def exact_ratio(family: FidelityFamily, k: int, s, a, s_next, cfg: RatioConfig):
    """P_M(s'|s,a) / P_{M_k}(s'|s,a), clipped."""
    num = family.truth.transition[s, a, s_next]
    den = family.simulator(k).transition[s, a, s_next]
    if np.any(np.asarray(den) <= 0):
        raise ZeroDivisionError("simulator assigns zero probability to an observed transition")
    return _clip(num / den, cfg)


def plug_in_kl(counts: DiscriminatorCounts) -> np.ndarray:
    p_real, p_sim = counts.transition_estimates()
    return kl_rows(p_real, p_sim)


def omega_weights(kl_table, visited) -> np.ndarray:
    """KL gaps normalised over visited pairs; uniform over them when all gaps vanish."""
    kl_table = np.asarray(kl_table, dtype=float)
    visited = np.asarray(visited, dtype=bool)
    if np.any(kl_table < 0):
        raise ValueError("KL table must be nonnegative")
    if not visited.any():
        raise ValueError("no visited (s, a) pairs")
    w = np.where(visited, kl_table, 0.0)
    total = w.sum()
    if total < 1e-12:
        return visited / visited.sum()
    return w / total


# ---------------------------------------------------------------------------
# Combined loss
# ---------------------------------------------------------------------------


@dataclass
class H2oLossBreakdown:
    conservative: float
    offline_bellman: float
    online_bellman: float
    total: float


def h2o_loss(member: EnsembleMember, offline: Batch, sim: Batch, ratios, omega,
             alpha_c: float, gamma: float) -> H2oLossBreakdown:
    """Conservative term plus per-sample-mean squared residuals on offline and
    ratio-weighted simulator data, with targets under ``member.policy``."""
    if offline.size == 0 or sim.size == 0:
        raise ValueError("empty batch")
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (sim.size,):
        raise ValueError("ratios must align with simulator transitions")
    q, pi = member.q, member.policy
    cons = cql_term(q, omega, offline, alpha_c)
    off_res = q[offline.s, offline.a] - _backup(q, pi, offline, gamma)
    sim_res = q[sim.s, sim.a] - _backup(q, pi, sim, gamma)
    off = float(np.mean(off_res ** 2))
    onl = float(np.mean(ratios * sim_res ** 2))
    return H2oLossBreakdown(cons, off, onl, cons + off + onl)


def _backup(q, pi, batch, gamma):
    return batch.r + gamma * (pi * q).sum(axis=1)[batch.s_next]


def h2o_loss_grad(q, policy, offline: Batch, sim: Batch, ratios, omega, alpha_c: float,
                  gamma: float) -> np.ndarray:
    """Analytic gradient of ``h2o_loss(...).total`` with respect to every Q entry."""
    S, A = q.shape
    freq = offline.sa_counts(S, A) / offline.size
    g = cql_grad(q, check_omega(omega), freq, alpha_c)
    g += ResidualTerm.from_batch(offline).grad(q, policy, gamma)
    g += ResidualTerm.from_batch(sim, ratios).grad(q, policy, gamma)
    return g


# ---------------------------------------------------------------------------
# Update
# ---------------------------------------------------------------------------


def visited_pairs(*batches: Batch, num_states: int, num_actions: int) -> np.ndarray:
    visited = np.zeros((num_states, num_actions), dtype=bool)
    for b in batches:
        visited[b.s, b.a] = True
    return visited


def sim_weights(family: FidelityFamily, k: int, offline: Batch, sim: Batch,
                ratio_cfg: RatioConfig, counts: Optional[DiscriminatorCounts] = None):
    """Per-transition ratios for ``sim`` and the omega table for fidelity ``k``."""
    truth = family.truth
    S, A = truth.num_states, truth.num_actions
    visited = visited_pairs(offline, sim, num_states=S, num_actions=A)
    if ratio_cfg.mode == "exact-oracle":
        ratios = exact_ratio(family, k, sim.s, sim.a, sim.s_next, ratio_cfg)
        kl = kl_gap(family, k)
    else:
        if counts is None:
            counts = fit_discriminators(offline, sim, ratio_cfg.smoothing, S, A)
        ratios = discriminator_ratio(counts, sim.s, sim.a, sim.s_next, ratio_cfg)
        kl = plug_in_kl(counts)
    return ratios, omega_weights(kl, visited)


def h2o_update(member: EnsembleMember, offline: Batch, sim: Batch, family: FidelityFamily,
               k: int, cfg: CqlConfig, ratio_cfg: RatioConfig,
               counts: Optional[DiscriminatorCounts] = None, weights=None) -> EnsembleMember:
    """Return a copy of ``member`` after ``cfg.epochs`` descent steps on the combined loss.

    ``counts`` (shared, read-only) and ``weights`` (precomputed ``(ratios, omega)``)
    let a caller reuse per-round quantities across members.
    """
    if sim.fidelity != k:
        raise ValueError(f"simulator batch tagged {sim.fidelity!r}, expected {k}")
    truth = family.truth
    S, A = truth.num_states, truth.num_actions
    ratios, omega = weights if weights is not None else sim_weights(
        family, k, offline, sim, ratio_cfg, counts)
    freq = offline.sa_counts(S, A) / offline.size
    terms = [ResidualTerm.from_batch(offline), ResidualTerm.from_batch(sim, ratios)]
    q = descend(member.q, terms, omega, freq, cfg, truth.gamma)
    updated = member.copy()
    updated.q = q
    updated.policy = greedy_improve(q)
    return updated
