"""Bootstrapped conservative Q-learning on tabular data (the offline phase)."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax

from .fidelity import OfflineDataset
from .mdp import Batch, greedy_improve

OMEGA_TOL = 1e-9


@dataclass
class BootstrapMask:
    bits: np.ndarray
    member_index: int

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if not self.bits.any():
            raise ValueError("bootstrap mask selects no transitions")


@dataclass
class CqlConfig:
    alpha_c: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 200
    target_refresh: int = 10

    def __post_init__(self):
        if self.alpha_c < 0:
            raise ValueError("alpha_c must be nonnegative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 1 or self.target_refresh < 1:
            raise ValueError("epochs and target_refresh must be positive")


@dataclass
class EnsembleMember:
    index: int
    mask: BootstrapMask
    q: np.ndarray
    policy: np.ndarray
    rng: Optional[np.random.Generator] = field(default=None, repr=False, compare=False)

    def copy(self) -> "EnsembleMember":
        return EnsembleMember(self.index, self.mask, self.q.copy(), self.policy.copy(), self.rng)


def draw_masks(n: int, L: int, rng: np.random.Generator) -> List[BootstrapMask]:
    """L independent Bernoulli(0.5) masks over n transitions; empty masks are redrawn."""
    if n < 1 or L < 2:
        raise ValueError("need n >= 1 and L >= 2")
    masks = []
    for ell in range(L):
        bits = rng.random(n) < 0.5
        while not bits.any():
            bits = rng.random(n) < 0.5
        masks.append(BootstrapMask(bits, ell))
    return masks


def check_omega(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    if np.any(omega < 0) or abs(omega.sum() - 1.0) > OMEGA_TOL:
        raise ValueError("omega must be nonnegative and sum to 1")
    return omega


def cql_term(q, omega, offline: Batch, alpha_c: float) -> float:
    """alpha_c * (log sum_{s,a} omega exp(Q) - mean over offline of Q(s, a))."""
    omega = check_omega(omega)
    if alpha_c == 0:
        return 0.0
    q = np.asarray(q, dtype=float)
    lse = logsumexp(q.ravel(), b=omega.ravel())
    return float(alpha_c * (lse - q[offline.s, offline.a].mean()))


def cql_grad(q, omega, sa_freq, alpha_c: float) -> np.ndarray:
    """Gradient of ``cql_term``; ``sa_freq`` is the offline (s, a) frequency table."""
    if alpha_c == 0:
        return np.zeros_like(q)
    pos = omega > 0
    soft = np.zeros_like(q)
    soft[pos] = softmax(q[pos] + np.log(omega[pos]))
    return alpha_c * (soft - sa_freq)


def uniform_omega(visited: np.ndarray) -> np.ndarray:
    visited = np.asarray(visited, dtype=bool)
    if not visited.any():
        raise ValueError("no visited pairs")
    return visited / visited.sum()


# ---------------------------------------------------------------------------
# Squared Bellman residual terms
# ---------------------------------------------------------------------------


@dataclass
class ResidualTerm:
    """Weighted transitions of a per-sample-mean squared Bellman residual.

    ``weight`` already includes the 1/N of the mean and any importance ratio, so the
    term equals sum(weight * residual**2).
    """

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    weight: np.ndarray

    @classmethod
    def from_batch(cls, batch: Batch, ratios=None) -> "ResidualTerm":
        if batch.size == 0:
            raise ValueError("empty batch")
        w = np.ones(batch.size) if ratios is None else np.asarray(ratios, dtype=float)
        if w.shape != (batch.size,):
            raise ValueError("ratios must align with batch transitions")
        return cls(batch.s, batch.a, batch.r, batch.s_next, w / batch.size)

    def residuals(self, q, next_v, gamma) -> np.ndarray:
        return q[self.s, self.a] - self.r - gamma * next_v[self.s_next]

    def value(self, q, next_v, gamma) -> float:
        return float(np.dot(self.weight, self.residuals(q, next_v, gamma) ** 2))

    def grad(self, q, policy, gamma) -> np.ndarray:
        """Full gradient, differentiating through the target r + gamma * pi q(s')."""
        S, A = q.shape
        delta = self.residuals(q, (policy * q).sum(axis=1), gamma)
        wd = 2.0 * self.weight * delta
        g = np.bincount(self.s * A + self.a, weights=wd, minlength=S * A).reshape(S, A)
        into = np.bincount(self.s_next, weights=wd, minlength=S)
        return g - gamma * into[:, None] * policy

    def normal_equations(self, next_v, gamma, S, A) -> Tuple[np.ndarray, np.ndarray]:
        """Per-(s,a) sums of weight and weight * target, for frozen targets."""
        y = self.r + gamma * next_v[self.s_next]
        idx = self.s * A + self.a
        w = np.bincount(idx, weights=self.weight, minlength=S * A).reshape(S, A)
        wy = np.bincount(idx, weights=self.weight * y, minlength=S * A).reshape(S, A)
        return w, wy


def descend(q, terms: Sequence[ResidualTerm], omega, sa_freq, cfg: CqlConfig, gamma: float,
            policy=None) -> np.ndarray:
    """Gradient descent on the table against periodically refreshed frozen targets.

    With ``policy=None`` targets use the policy greedy in the frozen table; otherwise
    the given policy is held fixed. Each entry's step is ``lr`` unless that would
    exceed the inverse of its curvature bound, which keeps large importance ratios
    from making the iteration diverge.
    """
    q = np.array(q, dtype=float)
    S, A = q.shape
    w = wy = step = None
    omega = np.asarray(omega, dtype=float)
    pos = omega > 0
    log_omega = np.log(omega[pos])
    push_up = cfg.alpha_c * np.asarray(sa_freq, dtype=float)
    for epoch in range(cfg.epochs):
        if epoch % cfg.target_refresh == 0:
            q_hat = q.copy()
            pi = greedy_improve(q_hat) if policy is None else policy
            next_v = (pi * q_hat).sum(axis=1)
            w, wy = np.zeros((S, A)), np.zeros((S, A))
            for term in terms:
                tw, twy = term.normal_equations(next_v, gamma, S, A)
                w += tw
                wy += twy
            # per-entry step capped at the inverse curvature bound 2w + alpha_c
            step = cfg.learning_rate / np.maximum(1.0, cfg.learning_rate * (2.0 * w + cfg.alpha_c))
        grad = 2.0 * (w * q - wy) - push_up
        if cfg.alpha_c:
            z = q[pos] + log_omega
            e = np.exp(z - z.max())
            grad[pos] += cfg.alpha_c * e / e.sum()
        q -= step * grad
    return q


def frozen_loss(q, terms: Sequence[ResidualTerm], omega, offline: Batch, alpha_c, gamma, q_hat, policy):
    """Training objective with targets computed from a frozen table ``q_hat``."""
    next_v = (policy * q_hat).sum(axis=1)
    return cql_term(q, omega, offline, alpha_c) + sum(t.value(q, next_v, gamma) for t in terms)


# ---------------------------------------------------------------------------
# Offline training
# ---------------------------------------------------------------------------


def train_cql(dataset: OfflineDataset, mask: BootstrapMask, cfg: CqlConfig, num_states: int,
              num_actions: int, gamma: float, rng: Optional[np.random.Generator] = None,
              omega=None) -> EnsembleMember:
    """Conservative fitted Q-iteration on the masked offline transitions.

    ``omega`` defaults to the empirical (s, a) distribution of the masked data. The
    regularizer then pulls each Q entry toward the data-weighted soft maximum, which
    lowers the high values that bootstrapped targets read. Uniform weights over the
    visited pairs instead push frequent pairs up, and the greedy targets carry that
    upward (pass ``uniform_omega(freq > 0)`` to get that behaviour).
    """
    if mask.bits.shape != (len(dataset),):
        raise ValueError("mask length differs from dataset size")
    data = dataset.batch.select(mask.bits)
    if data.size == 0:
        raise ValueError("masked dataset is empty")
    freq = data.sa_counts(num_states, num_actions) / data.size
    if omega is None:
        omega = freq
    omega = check_omega(omega)
    q = descend(np.zeros((num_states, num_actions)), [ResidualTerm.from_batch(data)],
                omega, freq, cfg, gamma)
    return EnsembleMember(mask.member_index, mask, q, greedy_improve(q), rng)


def train_ensemble(dataset: OfflineDataset, cfg: CqlConfig, L: int, num_states: int,
                   num_actions: int, gamma: float, rng: np.random.Generator) -> List[EnsembleMember]:
    masks = draw_masks(len(dataset), L, rng)
    streams = rng.spawn(L)
    return [train_cql(dataset, m, cfg, num_states, num_actions, gamma, rng=st)
            for m, st in zip(masks, streams)]


# ---------------------------------------------------------------------------
# Checkpoints: q.csv, policy.csv and a key-value meta.txt
# ---------------------------------------------------------------------------


def _write_table(path: Path, table: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s"] + [f"a{j}" for j in range(table.shape[1])])
        for s, row in enumerate(table):
            w.writerow([s] + [repr(float(x)) for x in row])


def _read_table(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(x) for x in row[1:]] for row in rows])


def save_member(member: EnsembleMember, directory, cfg: Optional[CqlConfig] = None,
                mask_seed: Optional[int] = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_table(d / "q.csv", member.q)
    _write_table(d / "policy.csv", member.policy)
    meta = {
        "index": str(member.index),
        "mask_seed": "" if mask_seed is None else str(mask_seed),
        "mask": "".join("1" if b else "0" for b in member.mask.bits),
    }
    if cfg is not None:
        meta.update({f"cfg.{k}": repr(v) for k, v in asdict(cfg).items()})
    (d / "meta.txt").write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))
    return d


def load_member(directory) -> Tuple[EnsembleMember, dict]:
    """Inverse of ``save_member``; returns the member and its metadata strings."""
    d = Path(directory)
    meta = {}
    for line in (d / "meta.txt").read_text().splitlines():
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    index = int(meta["index"])
    mask = BootstrapMask(np.array([c == "1" for c in meta["mask"]]), index)
    member = EnsembleMember(index, mask, _read_table(d / "q.csv"), _read_table(d / "policy.csv"))
    return member, meta


def meta_config(meta: dict) -> Optional[CqlConfig]:
    """The CqlConfig recorded in checkpoint metadata, if any."""
    if "cfg.alpha_c" not in meta:
        return None
    return CqlConfig(alpha_c=float(meta["cfg.alpha_c"]),
                     learning_rate=float(meta["cfg.learning_rate"]),
                     epochs=int(meta["cfg.epochs"]),
                     target_refresh=int(meta["cfg.target_refresh"]))
