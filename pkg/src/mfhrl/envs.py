"""Desk-scale environments built on slip kernels."""

from __future__ import annotations

from typing import Iterable, Optional, Tuple

import numpy as np

from .mdp import TabularMdp, slip_mdp

# up, right, down, left
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))

Cell = Tuple[int, int]


def gridworld(
    size: int = 5,
    slip: float = 0.1,
    goal: Optional[Cell] = None,
    start: Cell = (0, 0),
    traps: Iterable[Cell] = (),
    gamma: float = 0.95,
    horizon: int = 30,
) -> TabularMdp:
    """Square gridworld with an absorbing goal paying 1 per step.

    Moves into the border leave the agent in place. Trap cells are absorbing
    and pay nothing. On a slip the executed action is uniformly random.
    """
    goal = (size - 1, size - 1) if goal is None else tuple(goal)
    traps = {tuple(c) for c in traps}
    S, A = size * size, len(MOVES)

    def idx(cell):
        return cell[0] * size + cell[1]

    nominal = np.zeros((S, A, S))
    reward = np.zeros((S, A))
    for row in range(size):
        for col in range(size):
            s = idx((row, col))
            if (row, col) == goal or (row, col) in traps:
                nominal[s, :, s] = 1.0
                if (row, col) == goal:
                    reward[s, :] = 1.0
                continue
            for a, (dr, dc) in enumerate(MOVES):
                r2 = min(max(row + dr, 0), size - 1)
                c2 = min(max(col + dc, 0), size - 1)
                nominal[s, a, idx((r2, c2))] = 1.0
    init = np.zeros(S)
    init[idx(start)] = 1.0
    return slip_mdp(nominal, reward, init, gamma, horizon, slip)


def slip_chain(slip: float = 0.1, gamma: float = 0.95, horizon: int = 20) -> TabularMdp:
    """Two states; action 1 moves to the rewarding state 1, action 0 to state 0."""
    nominal = np.zeros((2, 2, 2))
    nominal[:, 0, 0] = 1.0
    nominal[:, 1, 1] = 1.0
    reward = np.array([[0.0, 0.2], [0.5, 1.0]])
    return slip_mdp(nominal, reward, np.array([1.0, 0.0]), gamma, horizon, slip)


def ring(num_states: int = 5, slip: float = 0.2, gamma: float = 0.9, horizon: int = 10) -> TabularMdp:
    """Ring of states with stay / clockwise / counter-clockwise actions; reward at state 0."""
    S, A = num_states, 3
    nominal = np.zeros((S, A, S))
    for s in range(S):
        nominal[s, 0, s] = 1.0
        nominal[s, 1, (s + 1) % S] = 1.0
        nominal[s, 2, (s - 1) % S] = 1.0
    reward = np.zeros((S, A))
    reward[0] = 1.0
    return slip_mdp(nominal, reward, np.full(S, 1.0 / S), gamma, horizon, slip)


def random_mdp(rng: np.random.Generator, num_states: int, num_actions: int,
               gamma: float = 0.9, horizon: int = 10, slip: float = 0.3) -> TabularMdp:
    """Random deterministic nominal kernel under a slip, random rewards in [0, 1]."""
    targets = rng.integers(num_states, size=(num_states, num_actions))
    nominal = np.zeros((num_states, num_actions, num_states))
    nominal[np.arange(num_states)[:, None], np.arange(num_actions)[None, :], targets] = 1.0
    reward = rng.random((num_states, num_actions))
    init = rng.dirichlet(np.ones(num_states))
    init /= init.sum()
    return slip_mdp(nominal, reward, init, gamma, horizon, slip)


def dense_random_mdp(rng: np.random.Generator, num_states: int, num_actions: int,
                     gamma: float = 0.9, horizon: int = 10) -> TabularMdp:
    """Fully random Dirichlet transition rows (no slip structure)."""
    trans = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    trans /= trans.sum(-1, keepdims=True)
    init = rng.dirichlet(np.ones(num_states))
    init /= init.sum()
    return TabularMdp(rng.random((num_states, num_actions)), trans, init, gamma, horizon)

