"""Finite tabular MDPs: exact finite-horizon solvers, Bellman targets, seeded rollouts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Union

import numpy as np

ROW_TOL = 1e-12


class Transition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int


@dataclass
class TabularMdp:
    """A finite MDP with horizon ``horizon`` (episodes run ``horizon + 1`` steps).

    ``nominal`` and ``slip`` are optional: when present, the transition kernel is
    ``(1 - slip) * nominal + slip * mean_a nominal`` (a uniformly random action is
    executed on a slip), which lets fidelity families rescale the slip.
    """

    reward: np.ndarray  # (S, A), values in [0, 1]
    transition: np.ndarray  # (S, A, S)
    init_dist: np.ndarray  # (S,)
    gamma: float
    horizon: int
    nominal: Optional[np.ndarray] = field(default=None, repr=False)
    slip: Optional[float] = None

    def __post_init__(self):
        self.reward = np.asarray(self.reward, dtype=float)
        self.transition = np.asarray(self.transition, dtype=float)
        self.init_dist = np.asarray(self.init_dist, dtype=float)
        S, A = self.reward.shape
        if self.transition.shape != (S, A, S):
            raise ValueError(f"transition shape {self.transition.shape} != {(S, A, S)}")
        if self.init_dist.shape != (S,):
            raise ValueError("init_dist must have one entry per state")
        if np.any(self.transition < 0) or np.any(np.abs(self.transition.sum(-1) - 1) > ROW_TOL):
            raise ValueError("transition rows must be probability vectors")
        if np.any(self.init_dist < 0) or abs(self.init_dist.sum() - 1) > ROW_TOL:
            raise ValueError("init_dist must be a probability vector")
        if np.any(self.reward < 0) or np.any(self.reward > 1):
            raise ValueError("rewards must lie in [0, 1]")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    @property
    def num_states(self) -> int:
        return self.reward.shape[0]

    @property
    def num_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def episode_length(self) -> int:
        return self.horizon + 1


def slip_kernel(nominal: np.ndarray, slip: float) -> np.ndarray:
    """Mix a nominal kernel with the uniformly-random-action kernel."""
    random_action = nominal.mean(axis=1, keepdims=True)
    return (1.0 - slip) * nominal + slip * random_action


def slip_mdp(nominal, reward, init_dist, gamma, horizon, slip) -> TabularMdp:
    nominal = np.asarray(nominal, dtype=float)
    if not 0 <= slip <= 1:
        raise ValueError("slip must lie in [0, 1]")
    return TabularMdp(
        reward=reward,
        transition=slip_kernel(nominal, slip),
        init_dist=init_dist,
        gamma=gamma,
        horizon=horizon,
        nominal=nominal,
        slip=float(slip),
    )


def with_slip(mdp: TabularMdp, slip: float) -> TabularMdp:
    if mdp.nominal is None:
        raise ValueError("mdp has no nominal kernel to re-slip")
    return slip_mdp(mdp.nominal, mdp.reward, mdp.init_dist, mdp.gamma, mdp.horizon, slip)


def mdps_equal(m1: TabularMdp, m2: TabularMdp) -> bool:
    return (
        np.array_equal(m1.reward, m2.reward)
        and np.array_equal(m1.transition, m2.transition)
        and np.array_equal(m1.init_dist, m2.init_dist)
        and m1.gamma == m2.gamma
        and m1.horizon == m2.horizon
    )


def check_policy(policy: np.ndarray, num_states: int, num_actions: int) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (num_states, num_actions):
        raise ValueError(f"policy shape {policy.shape} != {(num_states, num_actions)}")
    if np.any(policy < 0) or np.any(np.abs(policy.sum(-1) - 1) > ROW_TOL):
        raise ValueError("policy rows must be probability vectors")
    return policy


def uniform_policy(num_states: int, num_actions: int) -> np.ndarray:
    return np.full((num_states, num_actions), 1.0 / num_actions)


def deterministic_policy(actions, num_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=int)
    policy = np.zeros((actions.size, num_actions))
    policy[np.arange(actions.size), actions] = 1.0
    return policy


# ---------------------------------------------------------------------------
# Exact solvers (backward induction over t = H..0)
# ---------------------------------------------------------------------------


def evaluate_policy(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """Time-0 value of a stationary policy over the finite horizon."""
    policy = check_policy(policy, mdp.num_states, mdp.num_actions)
    r_pi = (policy * mdp.reward).sum(axis=1)
    p_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    v = np.zeros(mdp.num_states)
    for _ in range(mdp.horizon + 1):
        v = r_pi + mdp.gamma * p_pi @ v
    return v


def expected_return(mdp: TabularMdp, policy: np.ndarray) -> float:
    """E_{s0 ~ rho}[sum_{t=0}^{H} gamma^t r(s_t, a_t)], computed exactly."""
    return float(mdp.init_dist @ evaluate_policy(mdp, policy))


def value_iteration(mdp: TabularMdp):
    """Finite-horizon optimum by backward induction.

    Returns the time-0 slices ``(V*, Q*)`` and the deterministic policy greedy
    in ``Q*`` (lowest action index on ties).
    """
    v = np.zeros(mdp.num_states)
    q = np.zeros((mdp.num_states, mdp.num_actions))
    for _ in range(mdp.horizon + 1):
        q = mdp.reward + mdp.gamma * mdp.transition @ v
        v = q.max(axis=1)
    return v, q, greedy_improve(q, 0.0)


def bellman_fixed_point(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """Stationary fixed point Q = r + gamma * P pi Q (requires gamma < 1)."""
    policy = check_policy(policy, mdp.num_states, mdp.num_actions)
    S, A = mdp.num_states, mdp.num_actions
    # Q(s,a) = r(s,a) + gamma * sum_{s',a'} P(s'|s,a) pi(a'|s') Q(s',a')
    p_sa = np.einsum("sat,tb->satb", mdp.transition, policy).reshape(S * A, S * A)
    q = np.linalg.solve(np.eye(S * A) - mdp.gamma * p_sa, mdp.reward.ravel())
    return q.reshape(S, A)


def occupancy(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """Expected (s, a) visitation per episode, summed over t = 0..H (undiscounted)."""
    policy = check_policy(policy, mdp.num_states, mdp.num_actions)
    d = mdp.init_dist.copy()
    occ = np.zeros_like(policy)
    for _ in range(mdp.horizon + 1):
        sa = d[:, None] * policy
        occ += sa
        d = np.einsum("sa,sat->t", sa, mdp.transition)
    return occ


# ---------------------------------------------------------------------------
# Bellman machinery
# ---------------------------------------------------------------------------


def bellman_backup(q, policy, batch: "Batch", gamma: float, reward=None) -> np.ndarray:
    """Sample-based T^pi Q: r(s,a) + gamma * sum_a' pi(a'|s') q(s', a') per transition.

    ``reward`` optionally overrides the batch rewards with an (S, A) lookup table.
    """
    q = np.asarray(q, dtype=float)
    S, A = q.shape
    if policy.shape != (S, A):
        raise ValueError("q and policy dimensions differ")
    if batch.size and (
        batch.s.max() >= S or batch.s_next.max() >= S or batch.a.max() >= A
        or min(batch.s.min(), batch.s_next.min(), batch.a.min()) < 0
    ):
        raise IndexError("batch indices out of range")
    r = batch.r if reward is None else np.asarray(reward)[batch.s, batch.a]
    next_v = (policy * q).sum(axis=1)
    return r + gamma * next_v[batch.s_next]


def greedy_improve(q, epsilon: float = 0.0) -> np.ndarray:
    """Epsilon-greedy policy; argmax ties go to the lowest action index."""
    q = np.asarray(q, dtype=float)
    if not 0 <= epsilon < 1:
        raise ValueError("epsilon must lie in [0, 1)")
    S, A = q.shape
    policy = np.full((S, A), epsilon / A)
    policy[np.arange(S), q.argmax(axis=1)] += 1.0 - epsilon
    return policy


# ---------------------------------------------------------------------------
# Transitions and rollouts
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Transitions stored column-wise. ``fidelity`` is a level 1..K or ``"offline"``."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    fidelity: Union[int, str] = "offline"
    round: int = 0

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.int64)
        self.a = np.asarray(self.a, dtype=np.int64)
        self.r = np.asarray(self.r, dtype=float)
        self.s_next = np.asarray(self.s_next, dtype=np.int64)
        n = self.s.size
        if not (self.a.size == self.r.size == self.s_next.size == n):
            raise ValueError("batch columns must have equal length")

    @property
    def size(self) -> int:
        return int(self.s.size)

    def __len__(self) -> int:
        return self.size

    def __iter__(self) -> Iterator[Transition]:
        for s, a, r, s2 in zip(self.s, self.a, self.r, self.s_next):
            yield Transition(int(s), int(a), float(r), int(s2))

    @classmethod
    def from_transitions(cls, transitions, fidelity="offline", round=0) -> "Batch":
        cols = list(zip(*transitions)) or [(), (), (), ()]
        return cls(*cols, fidelity=fidelity, round=round)

    def select(self, mask) -> "Batch":
        mask = np.asarray(mask, dtype=bool)
        return Batch(self.s[mask], self.a[mask], self.r[mask], self.s_next[mask],
                     fidelity=self.fidelity, round=self.round)

    def sa_counts(self, num_states: int, num_actions: int) -> np.ndarray:
        flat = np.bincount(self.s * num_actions + self.a, minlength=num_states * num_actions)
        return flat.reshape(num_states, num_actions).astype(float)

    def sas_counts(self, num_states: int, num_actions: int) -> np.ndarray:
        idx = (self.s * num_actions + self.a) * num_states + self.s_next
        flat = np.bincount(idx, minlength=num_states * num_actions * num_states)
        return flat.reshape(num_states, num_actions, num_states).astype(float)

    def same_as(self, other: "Batch") -> bool:
        return (
            np.array_equal(self.s, other.s) and np.array_equal(self.a, other.a)
            and np.array_equal(self.r, other.r) and np.array_equal(self.s_next, other.s_next)
            and self.fidelity == other.fidelity and self.round == other.round
        )


def _sample_rows(cdf_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    return (cdf_rows > u[:, None]).argmax(axis=1)


def _cdf(p: np.ndarray) -> np.ndarray:
    c = np.cumsum(p, axis=-1)
    return c / c[..., -1:]


def rollout(mdp: TabularMdp, policy, num_episodes: int, rng: np.random.Generator,
            fidelity: Union[int, str] = "offline", round: int = 0) -> Batch:
    """Roll out ``num_episodes`` full episodes of ``H + 1`` steps each.

    Transitions are ordered episode-major. Consumes ``rng`` deterministically.
    """
    policy = check_policy(policy, mdp.num_states, mdp.num_actions)
    if num_episodes < 1:
        raise ValueError("num_episodes must be positive")
    T = mdp.episode_length
    pol_cdf = _cdf(policy)
    trans_cdf = _cdf(mdp.transition)
    init_cdf = _cdf(mdp.init_dist)

    states = np.empty((T, num_episodes), dtype=np.int64)
    actions = np.empty_like(states)
    nexts = np.empty_like(states)
    s = np.searchsorted(init_cdf, rng.random(num_episodes), side="right")
    s = np.minimum(s, mdp.num_states - 1)
    for t in range(T):
        a = _sample_rows(pol_cdf[s], rng.random(num_episodes))
        s2 = _sample_rows(trans_cdf[s, a], rng.random(num_episodes))
        states[t], actions[t], nexts[t] = s, a, s2
        s = s2
    states, actions, nexts = states.T.ravel(), actions.T.ravel(), nexts.T.ravel()
    return Batch(states, actions, mdp.reward[states, actions], nexts,
                 fidelity=fidelity, round=round)
