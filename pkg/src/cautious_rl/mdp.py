"""Finite discounted MDPs and the occupancy-measure algebra of the dual LP.

Conventions used throughout the package:

* ``transitions`` has shape ``(A, S, S)``; ``transitions[a, i, j] = P_a(i, j)``.
* expected rewards ``r`` and occupancy measures ``lam`` have shape ``(S, A)``.
* per-transition rewards ``r_hat`` have shape ``(S, S, A)`` indexed ``[i, j, a]``.
* value vectors have shape ``(S,)``.

Rewards are stored on an internal ``[0, 1]`` scale.  ``reward_affine`` records
``(scale, offset)`` such that ``raw = scale * internal + offset``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

ROW_SUM_TOL = 1e-12
MASS_TOL = 1e-9


class MDPError(ValueError):
    """Raised for malformed MDP data or inputs with mismatched shapes."""


def _readonly(x: np.ndarray) -> np.ndarray:
    x = np.array(x, dtype=float)
    x.setflags(write=False)
    return x


def rescale_rewards(raw: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    """Affinely map ``raw`` into ``[0, 1]``.

    Returns the rescaled array and ``(scale, offset)`` with
    ``raw = scale * rescaled + offset``.  Arrays already inside ``[0, 1]`` are
    returned unchanged with the identity map.
    """
    raw = np.asarray(raw, dtype=float)
    lo, hi = float(raw.min()), float(raw.max())
    if lo >= 0.0 and hi <= 1.0:
        return raw.copy(), (1.0, 0.0)
    scale = hi - lo if hi > lo else 1.0
    return np.clip((raw - lo) / scale, 0.0, 1.0), (scale, lo)


@dataclass(frozen=True)
class TabularMDP:
    """Immutable finite MDP with rewards on the internal ``[0, 1]`` scale."""

    transitions: np.ndarray
    gamma: float
    reward: np.ndarray
    transition_reward: Optional[np.ndarray] = None
    second_moment: Optional[np.ndarray] = None
    reward_affine: tuple[float, float] = (1.0, 0.0)
    num_states: int = field(init=False)
    num_actions: int = field(init=False)

    def __post_init__(self):
        P = np.asarray(self.transitions, dtype=float)
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise MDPError(f"transitions must have shape (A, S, S), got {P.shape}")
        A, S, _ = P.shape
        if S < 1 or A < 1:
            raise MDPError("need at least one state and one action")
        if not 0.0 < self.gamma < 1.0:
            raise MDPError(f"gamma must lie in (0, 1), got {self.gamma}")
        if (P < 0).any():
            raise MDPError("transition probabilities must be nonnegative")
        dev = np.abs(P.sum(axis=2) - 1.0).max()
        if dev > ROW_SUM_TOL:
            raise MDPError(f"transition rows must sum to 1 (max deviation {dev:.3e})")

        r = np.asarray(self.reward, dtype=float)
        if r.shape != (S, A):
            raise MDPError(f"reward must have shape {(S, A)}, got {r.shape}")
        rhat = self.transition_reward
        if rhat is not None:
            rhat = np.asarray(rhat, dtype=float)
            if rhat.shape != (S, S, A):
                raise MDPError(f"transition_reward must have shape {(S, S, A)}, got {rhat.shape}")
            if rhat.min() < 0.0 or rhat.max() > 1.0:
                raise MDPError("transition rewards must lie in [0, 1]")
            if np.abs(np.einsum("aij,ija->ia", P, rhat) - r).max() > 1e-12:
                raise MDPError("expected reward table disagrees with transition rewards")
        if r.min() < 0.0 or r.max() > 1.0:
            raise MDPError("expected rewards must lie in [0, 1]")

        R = self.second_moment
        if R is None:
            R = np.einsum("aij,ija->ia", P, rhat**2) if rhat is not None else r**2
        R = np.asarray(R, dtype=float)
        if R.shape != (S, A) or R.min() < 0.0 or R.max() > 1.0:
            raise MDPError("second moment table must have shape (S, A) with entries in [0, 1]")

        object.__setattr__(self, "transitions", _readonly(P))
        object.__setattr__(self, "reward", _readonly(r))
        object.__setattr__(self, "transition_reward", None if rhat is None else _readonly(rhat))
        object.__setattr__(self, "second_moment", _readonly(R))
        object.__setattr__(self, "reward_affine", (float(self.reward_affine[0]), float(self.reward_affine[1])))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "num_states", S)
        object.__setattr__(self, "num_actions", A)

    @classmethod
    def from_transition_rewards(cls, transitions, transition_reward, gamma: float) -> "TabularMDP":
        """Build from raw per-transition rewards of any sign, rescaling into ``[0, 1]``."""
        P = np.asarray(transitions, dtype=float)
        rhat, affine = rescale_rewards(transition_reward)
        r = np.einsum("aij,ija->ia", P, rhat)
        return cls(P, gamma, np.clip(r, 0.0, 1.0), transition_reward=rhat, reward_affine=affine)

    @classmethod
    def from_expected_rewards(cls, transitions, reward, gamma: float) -> "TabularMDP":
        """Build from raw expected rewards ``(S, A)``; rewards are deterministic given ``(s, a)``."""
        r, affine = rescale_rewards(reward)
        return cls(np.asarray(transitions, dtype=float), gamma, r, reward_affine=affine)

    @property
    def num_pairs(self) -> int:
        return self.num_states * self.num_actions

    def to_raw(self, x):
        """Map internal per-step rewards to the raw user scale."""
        scale, offset = self.reward_affine
        return scale * np.asarray(x) + offset

    def raw_return(self, internal_return: float) -> float:
        """Map a discounted return computed on internal rewards back to the raw scale."""
        scale, offset = self.reward_affine
        return scale * internal_return + offset / (1.0 - self.gamma)

    def flow_matrix(self) -> np.ndarray:
        """Matrix ``B`` of shape ``(S, S*A)`` with ``B @ lam.ravel() = sum_a (I - gamma P_a^T) lam_a``."""
        S, A = self.num_states, self.num_actions
        B = -self.gamma * np.transpose(self.transitions, (2, 1, 0)).reshape(S, S * A)
        B[np.arange(S).repeat(A), np.arange(S * A)] += 1.0
        return B


def uniform_xi(num_states: int) -> np.ndarray:
    return np.full(num_states, 1.0 / num_states)


def check_distribution(xi, num_states: int) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (num_states,):
        raise MDPError(f"initial distribution must have shape ({num_states},), got {xi.shape}")
    if (xi < 0).any() or abs(xi.sum() - 1.0) > 1e-12:
        raise MDPError("invalid initial distribution: must be nonnegative and sum to 1")
    return xi


def check_occupancy(lam, gamma: float, tol: float = MASS_TOL) -> np.ndarray:
    """Validate a point of the feasible box ``{lam >= 0, ||lam||_1 = 1/(1-gamma)}``."""
    lam = np.asarray(lam, dtype=float)
    if (lam < 0).any():
        raise MDPError("occupancy measure has negative entries")
    mass = lam.sum() * (1.0 - gamma)
    if abs(mass - 1.0) > tol:
        raise MDPError(f"occupancy measure has normalized mass {mass!r}, expected 1")
    return lam


def _check_shape(x, shape, name):
    x = np.asarray(x, dtype=float)
    if x.shape != shape:
        raise MDPError(f"{name} must have shape {shape}, got {x.shape}")
    return x


def expected_reward_table(mdp: TabularMDP) -> np.ndarray:
    """``r_{ia} = sum_j P_a(i, j) r_hat_{ija}``."""
    if mdp.transition_reward is None:
        raise MDPError("no transition rewards: MDP was built from expected rewards only")
    return np.einsum("aij,ija->ia", mdp.transitions, mdp.transition_reward)


def policy_from_occupancy(lam) -> np.ndarray:
    """Normalize each state row of ``lam``; all-zero rows become uniform."""
    lam = np.asarray(lam, dtype=float)
    if (lam < 0).any():
        raise MDPError("occupancy measure has negative entries")
    mass = lam.sum(axis=1, keepdims=True)
    pi = np.full_like(lam, 1.0 / lam.shape[1])
    nz = mass[:, 0] > 0
    pi[nz] = lam[nz] / mass[nz]
    return pi


def greedy_policy_from_occupancy(lam) -> np.ndarray:
    """Deterministic policy playing the heaviest action of each state row (lowest index on ties)."""
    lam = np.asarray(lam, dtype=float)
    if (lam < 0).any():
        raise MDPError("occupancy measure has negative entries")
    pi = np.zeros_like(lam)
    pi[np.arange(lam.shape[0]), np.argmax(lam, axis=1)] = 1.0
    return pi


def state_action_transition(mdp: TabularMDP, pi) -> np.ndarray:
    """Chain over pairs: ``P_pi[(s, a), (s', a')] = P_a(s, s') pi(a'|s')``."""
    pi = np.asarray(pi, dtype=float)
    S, A = mdp.num_states, mdp.num_actions
    return np.einsum("aij,jb->iajb", mdp.transitions, pi).reshape(S * A, S * A)


def occupancy_from_policy(mdp: TabularMDP, pi, xi=None, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Discounted state-action occupancy of ``pi`` started from ``xi``.

    Fixed-point iteration ``lam <- xi_hat + gamma P_pi^T lam`` (a gamma-contraction
    in l1) run until the increment falls below ``tol``.
    """
    S, A = mdp.num_states, mdp.num_actions
    pi = _check_shape(pi, (S, A), "policy")
    xi = uniform_xi(S) if xi is None else check_distribution(xi, S)
    xi_hat = (xi[:, None] * pi).ravel()
    PT = state_action_transition(mdp, pi).T.copy()
    lam = xi_hat.copy()
    g = mdp.gamma
    # stop once the remaining tail g/(1-g) * ||step|| is below tol
    for _ in range(max_iter):
        nxt = xi_hat + g * (PT @ lam)
        step = np.abs(nxt - lam).sum()
        lam = nxt
        if step * g / (1.0 - g) <= tol:
            break
    else:
        raise RuntimeError("occupancy fixed-point iteration did not converge")
    return lam.reshape(S, A)


def constraint_residual(mdp: TabularMDP, lam, xi=None) -> float:
    """Flow-balance violation ``||sum_a (I - gamma P_a^T) lam_a - xi||_1``."""
    S, A = mdp.num_states, mdp.num_actions
    lam = _check_shape(lam, (S, A), "occupancy measure")
    xi = uniform_xi(S) if xi is None else check_distribution(xi, S)
    inflow = np.einsum("aij,ia->j", mdp.transitions, lam)
    return float(np.abs(lam.sum(axis=1) - mdp.gamma * inflow - xi).sum())


def return_of_occupancy(lam, r) -> float:
    lam = np.asarray(lam, dtype=float)
    r = np.asarray(r, dtype=float)
    if lam.shape != r.shape:
        raise MDPError(f"shape mismatch: occupancy {lam.shape} vs reward {r.shape}")
    return float(np.sum(lam * r))


def lagrangian_value(mdp: TabularMDP, v, lam, risk=None, c: float = 0.0, xi=None) -> float:
    """Exact ``L(v, lam) = <lam, r> - c rho(lam) + <xi, v> + sum_a lam_a^T (gamma P_a - I) v``."""
    from .risk import risk_value

    S, A = mdp.num_states, mdp.num_actions
    v = _check_shape(v, (S,), "value vector")
    lam = _check_shape(lam, (S, A), "occupancy measure")
    xi = uniform_xi(S) if xi is None else check_distribution(xi, S)
    coupling = np.einsum("ia,aij,j->", lam, mdp.transitions, v) * mdp.gamma - np.sum(lam.sum(axis=1) * v)
    penalty = c * risk_value(risk, lam) if (risk is not None and c != 0.0) else 0.0
    return float(np.sum(lam * mdp.reward) - penalty + xi @ v + coupling)


# ---------------------------------------------------------------------------
# JSON file format


def mdp_to_dict(mdp: TabularMDP) -> dict:
    rewards = (
        {"per_transition": mdp.transition_reward.tolist()}
        if mdp.transition_reward is not None
        else {"expected": mdp.reward.tolist()}
    )
    return {
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        "gamma": mdp.gamma,
        "transitions": mdp.transitions.tolist(),
        "rewards": rewards,
        "reward_affine": {"scale": mdp.reward_affine[0], "offset": mdp.reward_affine[1]},
    }


def mdp_from_dict(doc: dict) -> TabularMDP:
    """Inverse of :func:`mdp_to_dict`.

    Rewards in the document are on the internal scale when ``reward_affine`` is
    present; a document without it is treated as raw and rescaled.
    """
    try:
        P = np.asarray(doc["transitions"], dtype=float)
        gamma = float(doc["gamma"])
        rewards = doc["rewards"]
    except KeyError as exc:
        raise MDPError(f"MDP document missing field {exc.args[0]!r}") from None
    S, A = int(doc.get("num_states", P.shape[1])), int(doc.get("num_actions", P.shape[0]))
    if P.shape != (A, S, S):
        raise MDPError(f"transitions shape {P.shape} does not match num_actions={A}, num_states={S}")
    affine = doc.get("reward_affine")
    if "per_transition" in rewards:
        rhat = np.asarray(rewards["per_transition"], dtype=float)
        if affine is None:
            return TabularMDP.from_transition_rewards(P, rhat, gamma)
        r = np.clip(np.einsum("aij,ija->ia", P, rhat), 0.0, 1.0)
        return TabularMDP(P, gamma, r, transition_reward=rhat, reward_affine=(affine["scale"], affine["offset"]))
    if "expected" in rewards:
        r = np.asarray(rewards["expected"], dtype=float)
        if affine is None:
            return TabularMDP.from_expected_rewards(P, r, gamma)
        return TabularMDP(P, gamma, r, reward_affine=(affine["scale"], affine["offset"]))
    raise MDPError("rewards must contain 'expected' or 'per_transition'")


def save_mdp(mdp: TabularMDP, path) -> None:
    Path(path).write_text(json.dumps(mdp_to_dict(mdp)))


def load_mdp(path) -> TabularMDP:
    return mdp_from_dict(json.loads(Path(path).read_text()))


def occupancy_to_dict(lam, gamma: float) -> dict:
    lam = np.asarray(lam, dtype=float)
    return {"gamma": float(gamma), "shape": list(lam.shape), "values": lam.tolist()}


def occupancy_from_dict(doc: dict) -> tuple[np.ndarray, float]:
    try:
        lam = np.asarray(doc["values"], dtype=float)
        gamma = float(doc["gamma"])
    except KeyError as exc:
        raise MDPError(f"occupancy document missing field {exc.args[0]!r}") from None
    if lam.ndim != 2:
        raise MDPError("occupancy values must be a 2-D table")
    return check_occupancy(lam, gamma), gamma


def save_occupancy(lam, gamma: float, path) -> None:
    """Write ``lam`` as JSON; floats are emitted with full round-trip precision."""
    Path(path).write_text(json.dumps(occupancy_to_dict(lam, gamma)))


def load_occupancy(path) -> tuple[np.ndarray, float]:
    return occupancy_from_dict(json.loads(Path(path).read_text()))
