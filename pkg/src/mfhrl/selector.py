"""Generalized posterior over ensemble members and gain-per-cost fidelity selection."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, Dict, List, Sequence

import numpy as np

from .fidelity import BudgetLedger, FidelityFamily, threshold
from .mdp import Batch

PROB_TOL = 1e-12


class BudgetExhausted(Exception):
    """No fidelity level is affordable with the remaining budget."""


class EmptyBuffer(Exception):
    """No stored batches for a fidelity level yet (warm-up required)."""


@dataclass
class SelectorConfig:
    eta: float = 1.0
    buffer_size: int = 8
    warmup: bool = True

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.buffer_size < 1:
            raise ValueError("buffer_size must be at least 1")


@dataclass
class PosteriorBelief:
    probs: np.ndarray
    round: int = 0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > PROB_TOL:
            raise ValueError("posterior must be a probability vector")

    @classmethod
    def uniform(cls, L: int) -> "PosteriorBelief":
        return cls(np.full(L, 1.0 / L))


class HistoryBuffer:
    """The most recent ``size`` simulator batches per fidelity level."""

    def __init__(self, K: int, size: int = 8):
        self.size = size
        self._buffers: Dict[int, Deque[Batch]] = {k: deque(maxlen=size) for k in range(1, K + 1)}

    def add(self, batch: Batch) -> None:
        if batch.fidelity not in self._buffers:
            raise ValueError(f"batch tagged {batch.fidelity!r} is not a simulator level")
        self._buffers[batch.fidelity].append(batch)

    def __getitem__(self, k: int) -> List[Batch]:
        return list(self._buffers[k])

    def levels_missing(self) -> List[int]:
        return [k for k, buf in self._buffers.items() if not buf]


def posterior_update(p: PosteriorBelief, losses, eta: float = 1.0) -> PosteriorBelief:
    """p'_l proportional to p_l * exp(-eta * loss_l)."""
    losses = np.asarray(losses, dtype=float)
    if losses.shape != p.probs.shape or not np.all(np.isfinite(losses)):
        raise ValueError("need one finite loss per member")
    with np.errstate(divide="ignore"):
        logits = np.log(p.probs) - eta * losses
    logits -= logits.max()
    w = np.exp(logits)
    return PosteriorBelief(w / w.sum(), p.round + 1)


def entropy(p) -> float:
    """Shannon entropy in nats with 0 log 0 = 0."""
    probs = p.probs if isinstance(p, PosteriorBelief) else np.asarray(p, dtype=float)
    nz = probs[probs > 0]
    return float(max(-(nz * np.log(nz)).sum(), 0.0))


LossFn = Callable[[object, Batch], float]


def expected_posterior_entropy(p: PosteriorBelief, buffer_k: Sequence[Batch], ensemble,
                               eta: float, loss_fn: LossFn) -> float:
    """Mean entropy of the hypothetical posteriors after each stored batch.

    ``loss_fn(member, batch)`` evaluates a member's current loss on a stored batch.
    """
    if not buffer_k:
        raise EmptyBuffer("no stored batches for this fidelity")
    ents = [entropy(posterior_update(p, [loss_fn(m, b) for m in ensemble], eta))
            for b in buffer_k]
    return float(np.mean(ents))


def information_gain(p: PosteriorBelief, buffer_k, ensemble, eta: float, loss_fn: LossFn) -> float:
    h = entropy(p)
    return max(0.0, h - expected_posterior_entropy(p, buffer_k, ensemble, eta, loss_fn))


def select_fidelity(gains, family: FidelityFamily, ledger: BudgetLedger) -> int:
    """Level maximizing gain / cost if that clears 1/sqrt(remaining), else K.

    Ties in the ratio go to the higher level. An unaffordable choice falls back to
    the most expensive affordable level.
    """
    gains = np.asarray(gains, dtype=float)
    K = family.K
    if gains.shape != (K,):
        raise ValueError("need one gain per fidelity level")
    remaining = ledger.remaining
    affordable = [k for k in range(1, K + 1) if family.cost(k) <= remaining]
    if remaining <= 0 or not affordable:
        raise BudgetExhausted(f"remaining budget {remaining} affords no level")
    per_cost = gains / family.costs
    candidate = K - int(np.argmax(per_cost[::-1]))
    chosen = candidate if per_cost[candidate - 1] >= threshold(ledger) else K
    if family.cost(chosen) > remaining:
        chosen = max(affordable)
    return chosen


def map_policy(p: PosteriorBelief, ensemble) -> np.ndarray:
    """Policy of the most probable member (lowest index on ties)."""
    return ensemble[int(np.argmax(p.probs))].policy
