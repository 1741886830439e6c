"""Sampling access to an MDP: the only view of the dynamics the stochastic solvers get."""

from __future__ import annotations

import numpy as np

from .mdp import TabularMDP


class GenerativeModel:
    """Draws ``(s_next, r_hat)`` for a queried pair by inverse CDF on its own rng.

    Each call to :meth:`sample` consumes exactly one uniform from ``rng``, so a
    block of ``k`` calls is reproduced by ``rng.random(k)``; the fused solver
    kernel relies on this.
    """

    def __init__(self, mdp: TabularMDP, rng=None):
        self.mdp = mdp
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.cdf = np.ascontiguousarray(np.cumsum(mdp.transitions, axis=2))
        if mdp.transition_reward is not None:
            table = mdp.transition_reward
        else:
            table = np.broadcast_to(mdp.reward[:, None, :], (mdp.num_states, mdp.num_states, mdp.num_actions))
        self.reward_table = np.ascontiguousarray(table, dtype=float)

    @property
    def num_states(self) -> int:
        return self.mdp.num_states

    @property
    def num_actions(self) -> int:
        return self.mdp.num_actions

    def next_state(self, s: int, a: int, u: float) -> int:
        row = self.cdf[a, s]
        j = int(np.searchsorted(row, u * row[-1], side="right"))
        return min(j, row.shape[0] - 1)

    def sample(self, s: int, a: int) -> tuple[int, float]:
        j = self.next_state(s, a, self.rng.random())
        return j, float(self.reward_table[s, j, a])


def generative_sample(model: GenerativeModel, s: int, a: int) -> tuple[int, float]:
    return model.sample(s, a)
