"""Multi-fidelity simulator families, the cost ledger and the offline dataset."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .mdp import Batch, TabularMdp, rollout, with_slip


class InsufficientBudget(Exception):
    """A charge would push spending past the total budget."""


@dataclass
class FidelityFamily:
    """Simulators M_1..M_K; level K is the true environment.

    Levels are 1-based throughout the package: ``family.simulator(k)`` for k in 1..K.
    """

    simulators: List[TabularMdp]
    fidelities: np.ndarray
    costs: np.ndarray

    def __post_init__(self):
        self.fidelities = np.asarray(self.fidelities, dtype=float)
        self.costs = np.asarray(self.costs, dtype=float)
        K = len(self.simulators)
        if K < 1 or self.fidelities.shape != (K,) or self.costs.shape != (K,):
            raise ValueError("need one fidelity and one cost per simulator")
        if np.any(self.costs <= 0) or np.any(np.diff(self.costs) <= 0):
            raise ValueError("costs must be positive and strictly increasing")
        if np.any(np.diff(self.fidelities) < 0):
            raise ValueError("fidelities must be non-decreasing")
        ref = self.simulators[0]
        for m in self.simulators[1:]:
            if (m.reward.shape != ref.reward.shape or m.gamma != ref.gamma
                    or m.horizon != ref.horizon):
                raise ValueError("simulators must share S, A, gamma and H")

    @property
    def K(self) -> int:
        return len(self.simulators)

    @property
    def truth(self) -> TabularMdp:
        return self.simulators[-1]

    def simulator(self, k: int) -> TabularMdp:
        self._check_level(k)
        return self.simulators[k - 1]

    def cost(self, k: int) -> float:
        self._check_level(k)
        return float(self.costs[k - 1])

    def _check_level(self, k):
        if not 1 <= k <= self.K:
            raise IndexError(f"fidelity level {k} outside 1..{self.K}")


def build_family(base: TabularMdp, perturb_factors: Sequence[float],
                 costs: Sequence[float]) -> FidelityFamily:
    """Scale the base slip by each factor (clamped at 1); the last factor must be 1."""
    factors = [float(f) for f in perturb_factors]
    if len(factors) != len(costs):
        raise ValueError("one cost per perturbation factor")
    if factors[-1] != 1.0:
        raise ValueError("the highest-fidelity factor must be 1.0 (true environment)")
    if np.any(np.diff(np.asarray(costs, dtype=float)) <= 0):
        raise ValueError("costs must be strictly increasing")
    if base.slip is None:
        raise ValueError("base mdp must carry a nominal kernel and slip")
    sims = [with_slip(base, min(1.0, f * base.slip)) for f in factors[:-1]]
    sims.append(base)
    return FidelityFamily(sims, fidelities=[1.0 / f for f in factors], costs=costs)


# ---------------------------------------------------------------------------
# Budget
# ---------------------------------------------------------------------------


@dataclass
class BudgetLedger:
    total_budget: float
    spent: float = 0.0
    history: List[Tuple[int, int, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.total_budget <= 0:
            raise ValueError("total budget must be positive")

    @property
    def remaining(self) -> float:
        return self.total_budget - self.spent

    def replay(self) -> float:
        return math.fsum(c for _, _, c in self.history)

    def audit(self) -> bool:
        """Replay the history: charged costs must reproduce ``spent`` and fit the budget."""
        return self.replay() == self.spent and self.spent <= self.total_budget


def charge(ledger: BudgetLedger, round: int, fidelity: int, family: FidelityFamily) -> BudgetLedger:
    cost = family.cost(fidelity)
    if ledger.spent + cost > ledger.total_budget:
        raise InsufficientBudget(
            f"round {round}: cost {cost} exceeds remaining {ledger.remaining}")
    ledger.history.append((round, fidelity, cost))
    ledger.spent = ledger.replay()
    return ledger


def threshold(ledger: BudgetLedger) -> float:
    """Acceptance bar 1 / sqrt(remaining budget)."""
    remaining = ledger.remaining
    if remaining <= 0:
        raise InsufficientBudget("budget exhausted")
    return 1.0 / math.sqrt(remaining)


# ---------------------------------------------------------------------------
# Offline data
# ---------------------------------------------------------------------------


@dataclass
class OfflineDataset:
    batch: Batch
    behavior_policy: np.ndarray

    def __len__(self):
        return self.batch.size


def generate_offline(family: FidelityFamily, behavior, n_transitions: int,
                     rng: np.random.Generator) -> OfflineDataset:
    truth = family.truth
    if n_transitions < 1 or n_transitions % truth.episode_length:
        raise ValueError(
            f"n_transitions={n_transitions} not a multiple of episode length {truth.episode_length}")
    batch = rollout(truth, behavior, n_transitions // truth.episode_length, rng,
                    fidelity="offline", round=0)
    return OfflineDataset(batch, np.asarray(behavior, dtype=float))


def mixture_behavior(optimal_policy, num_actions: int, weight: float = 0.5) -> np.ndarray:
    return weight * np.asarray(optimal_policy) + (1 - weight) / num_actions


def save_batch_csv(batch: Batch, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "a", "r", "s_next"])
        for t in batch:
            w.writerow([t.s, t.a, repr(t.r), t.s_next])


def load_batch_csv(path, fidelity="offline", round=0) -> Batch:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return Batch([int(r["s"]) for r in rows], [int(r["a"]) for r in rows],
                 [float(r["r"]) for r in rows], [int(r["s_next"]) for r in rows],
                 fidelity=fidelity, round=round)


# ---------------------------------------------------------------------------
# Dynamics gaps
# ---------------------------------------------------------------------------


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p || q) along the last axis with 0 log(0/q) = 0."""
    if np.any((p > 0) & (q <= 0)):
        raise ValueError("support mismatch: p > 0 where q = 0")
    pos = p > 0
    terms = np.zeros_like(p)
    terms[pos] = p[pos] * np.log(p[pos] / q[pos])
    return np.maximum(terms.sum(axis=-1), 0.0)


def kl_gap(family: FidelityFamily, k: int) -> np.ndarray:
    """KL(P_M(.|s,a) || P_{M_k}(.|s,a)) for every (s, a)."""
    return kl_rows(family.truth.transition, family.simulator(k).transition)

