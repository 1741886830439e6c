"""Slippery gridworlds, trajectory rollouts, and the built-in experiment presets.

Cells are indexed row-major, ``s = row * width + col``, with row 0 at the top.
Actions are ``up, down, left, right``.  The intended move succeeds with
probability ``p``; each perpendicular move happens with probability
``(1 - p) / 2``; the reverse move never happens.  A move that would leave the
grid keeps the agent in place.

The reward of a transition is the raw reward of the destination cell.  An
absorbing goal has a reward-0 self-loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from .generative import GenerativeModel, generative_sample
from .mdp import MDPError, TabularMDP

ACTIONS = ("up", "down", "left", "right")
_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))
_PERPENDICULAR = ((2, 3), (2, 3), (0, 1), (0, 1))

__all__ = [
    "ACTIONS",
    "GridSpec",
    "GenerativeModel",
    "RolloutResult",
    "build_mdp",
    "builtin_experiments",
    "default_horizon",
    "generative_sample",
    "render_ascii",
    "rollout",
]


@dataclass(frozen=True)
class GridSpec:
    """A gridworld description.  ``rewards`` is a ``height x width`` table of raw cell rewards."""

    width: int
    height: int
    p: float
    rewards: tuple
    start: tuple = (0, 0)
    goal: Optional[tuple] = None
    goal_absorbing: bool = True
    gamma: float = 0.9
    seed: int = 0
    name: str = ""
    unrewarding: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise MDPError("degenerate grid: width and height must be positive")
        if not 0.0 < self.p <= 1.0:
            raise MDPError("p must lie in (0, 1]")
        table = np.asarray(self.rewards, dtype=float)
        if table.shape != (self.height, self.width):
            raise MDPError(f"reward map must have shape {(self.height, self.width)}, got {table.shape}")
        object.__setattr__(self, "rewards", tuple(tuple(float(x) for x in row) for row in table))
        object.__setattr__(self, "start", tuple(int(x) for x in self.start))
        if self.goal is not None:
            object.__setattr__(self, "goal", tuple(int(x) for x in self.goal))
        for name in ("start", "goal"):
            cell = getattr(self, name)
            if cell is not None and not (0 <= cell[0] < self.height and 0 <= cell[1] < self.width):
                raise MDPError(f"{name} cell {cell} lies outside the grid")
        object.__setattr__(self, "unrewarding", tuple(sorted(int(s) for s in self.unrewarding)))

    @property
    def num_states(self) -> int:
        return self.width * self.height

    def state(self, cell) -> int:
        return int(cell[0]) * self.width + int(cell[1])

    def cell(self, s: int) -> tuple:
        return divmod(int(s), self.width)

    @property
    def start_state(self) -> int:
        return self.state(self.start)

    @property
    def goal_state(self) -> Optional[int]:
        return None if self.goal is None else self.state(self.goal)

    def reward_map(self) -> np.ndarray:
        return np.asarray(self.rewards, dtype=float)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "width": self.width,
            "height": self.height,
            "p": self.p,
            "gamma": self.gamma,
            "rewards": [list(r) for r in self.rewards],
            "start": list(self.start),
            "goal": None if self.goal is None else list(self.goal),
            "goal_absorbing": self.goal_absorbing,
            "seed": self.seed,
            "unrewarding": list(self.unrewarding),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GridSpec":
        """Parse a JSON fragment.

        ``rewards`` is either a full table or
        ``{"default": x, "regions": [{"rows": [r0, r1], "cols": [c0, c1], "value": y}, ...]}``
        with inclusive bounds; later regions overwrite earlier ones.  A
        ``"preset"`` key starts from a built-in spec and applies the remaining
        keys as overrides.
        """
        doc = dict(doc)
        if "preset" in doc:
            base = builtin_experiments(**doc.pop("preset_params", {}))[doc.pop("preset")]
            fields = base.to_dict()
            fields.update(doc)
            doc = fields
        try:
            width, height = int(doc["width"]), int(doc["height"])
            rewards = doc["rewards"]
        except KeyError as exc:
            raise MDPError(f"grid spec missing field {exc.args[0]!r}") from None
        if isinstance(rewards, dict):
            table = np.full((height, width), float(rewards.get("default", 0.0)))
            for reg in rewards.get("regions", []):
                r0, r1 = reg["rows"]
                c0, c1 = reg["cols"]
                table[r0:r1 + 1, c0:c1 + 1] = float(reg["value"])
            rewards = table
        goal = doc.get("goal")
        return cls(width=width, height=height, p=float(doc.get("p", 1.0)), rewards=rewards,
                   start=tuple(doc.get("start", (0, 0))), goal=None if goal is None else tuple(goal),
                   goal_absorbing=bool(doc.get("goal_absorbing", True)), gamma=float(doc.get("gamma", 0.9)),
                   seed=int(doc.get("seed", 0)), name=str(doc.get("name", "")),
                   unrewarding=tuple(doc.get("unrewarding", ())))


def _neighbor(spec: GridSpec, s: int, move: int) -> int:
    row, col = spec.cell(s)
    dr, dc = _MOVES[move]
    nr, nc = row + dr, col + dc
    if 0 <= nr < spec.height and 0 <= nc < spec.width:
        return nr * spec.width + nc
    return s


def transition_tensor(spec: GridSpec) -> np.ndarray:
    S = spec.num_states
    P = np.zeros((4, S, S))
    side = (1.0 - spec.p) / 2.0
    goal = spec.goal_state if spec.goal_absorbing else None
    for s in range(S):
        if s == goal:
            P[:, s, s] = 1.0
            continue
        for a in range(4):
            P[a, s, _neighbor(spec, s, a)] += spec.p
            for q in _PERPENDICULAR[a]:
                P[a, s, _neighbor(spec, s, q)] += side
    return P


def raw_transition_rewards(spec: GridSpec) -> np.ndarray:
    """Raw ``r_hat[i, j, a]``: the destination cell's reward, 0 on the absorbing goal loop."""
    S = spec.num_states
    cell = spec.reward_map().ravel()
    rhat = np.broadcast_to(cell[None, :, None], (S, S, 4)).copy()
    if spec.goal_absorbing and spec.goal is not None:
        rhat[spec.goal_state] = 0.0
    return rhat


def build_mdp(spec: GridSpec) -> TabularMDP:
    """The gridworld as a :class:`TabularMDP` with rewards rescaled into ``[0, 1]``.

    The rescaling range covers only rewards that can actually occur (cell
    rewards plus 0 for an absorbing goal).
    """
    P = transition_tensor(spec)
    rhat = raw_transition_rewards(spec)
    occurs = P.transpose(1, 2, 0) > 0
    lo, hi = rhat[occurs].min(), rhat[occurs].max()
    if lo >= 0.0 and hi <= 1.0:
        scale, offset = 1.0, 0.0
    else:
        scale, offset = (hi - lo if hi > lo else 1.0), lo
    internal = np.clip((rhat - offset) / scale, 0.0, 1.0)
    r = np.einsum("aij,ija->ia", P, internal)
    return TabularMDP(P, spec.gamma, np.clip(r, 0.0, 1.0), transition_reward=internal, reward_affine=(scale, offset))


def make_model(spec: GridSpec, seed=None) -> GenerativeModel:
    return GenerativeModel(build_mdp(spec), spec.seed if seed is None else seed)


# ---------------------------------------------------------------------------
# rollouts


def default_horizon(gamma: float) -> int:
    return int(math.ceil(math.log(1e-8) / math.log(gamma)))


@dataclass
class RolloutResult:
    returns: np.ndarray
    mean: float
    variance: float
    degenerate: bool
    horizon: int
    visits: np.ndarray = field(repr=False, default=None)


def rollout(model: GenerativeModel, policy, start: Union[int, Sequence[float]], horizon: Optional[int] = None,
            n_trajectories: int = 100, rng=None) -> RolloutResult:
    """Discounted returns, on the raw reward scale, of ``n_trajectories`` simulated episodes.

    ``start`` is a state index or an initial distribution.  Actions are drawn
    from ``rng`` (default: the model's rng); transitions from the model's rng.
    ``visits[s]`` accumulates the discounted, normalized time spent in ``s``.
    """
    mdp = model.mdp
    S, A, gamma = mdp.num_states, mdp.num_actions, mdp.gamma
    pi = np.asarray(policy, dtype=float)
    if pi.shape != (S, A):
        raise MDPError(f"policy must have shape {(S, A)}")
    H = default_horizon(gamma) if horizon is None else int(horizon)
    arng = model.rng if rng is None else rng
    pi_cdf = np.cumsum(pi, axis=1)
    if np.ndim(start) == 0:
        start_cdf = None
        s0 = int(start)
    else:
        start_cdf = np.cumsum(np.asarray(start, dtype=float))
    scale, offset = mdp.reward_affine
    disc = gamma ** np.arange(H)
    returns = np.empty(n_trajectories)
    visits = np.zeros(S)
    for k in range(n_trajectories):
        s = s0 if start_cdf is None else min(int(np.searchsorted(start_cdf, arng.random() * start_cdf[-1], "right")), S - 1)
        total = 0.0
        for t in range(H):
            visits[s] += disc[t]
            row = pi_cdf[s]
            a = min(int(np.searchsorted(row, arng.random() * row[-1], side="right")), A - 1)
            s, r = model.sample(s, a)
            total += disc[t] * (scale * r + offset)
        returns[k] = total
    visits *= (1.0 - gamma) / (n_trajectories * (1.0 - gamma**H))
    if n_trajectories == 1:
        return RolloutResult(returns, float(returns[0]), 0.0, True, H, visits)
    return RolloutResult(returns, float(returns.mean()), float(returns.var(ddof=1)), False, H, visits)


def sample_path(model: GenerativeModel, policy, start: int, horizon: Optional[int] = None, rng=None) -> list:
    """One simulated trajectory as rows ``(t, state, action, next_state, raw_reward)``."""
    mdp = model.mdp
    pi_cdf = np.cumsum(np.asarray(policy, dtype=float), axis=1)
    H = default_horizon(mdp.gamma) if horizon is None else int(horizon)
    arng = model.rng if rng is None else rng
    scale, offset = mdp.reward_affine
    rows, s = [], int(start)
    for t in range(H):
        row = pi_cdf[s]
        a = min(int(np.searchsorted(row, arng.random() * row[-1], side="right")), mdp.num_actions - 1)
        nxt, r = model.sample(s, a)
        rows.append((t, s, a, nxt, scale * r + offset))
        s = nxt
    return rows


def return_moments(mdp: TabularMDP, policy, start) -> tuple[float, float]:
    """Exact mean and variance of the infinite-horizon discounted raw return.

    Solves the linear systems for the first and second moments of
    ``G = r_0 + gamma G'`` under ``policy`` from ``start`` (a state or a
    distribution).
    """
    S = mdp.num_states
    pi = np.asarray(policy, dtype=float)
    gamma = mdp.gamma
    scale, offset = mdp.reward_affine
    if mdp.transition_reward is not None:
        raw = scale * mdp.transition_reward + offset
    else:
        raw = np.broadcast_to((scale * mdp.reward + offset)[:, None, :], (S, S, mdp.num_actions))
    # W[s, j] = sum_a pi(a|s) P_a(s, j); moments of the one-step reward per (s, j)
    W = np.einsum("sa,asj->sj", pi, mdp.transitions)
    r1 = np.einsum("sa,asj,sja->s", pi, mdp.transitions, raw)
    r2 = np.einsum("sa,asj,sja->s", pi, mdp.transitions, raw**2)
    cross = np.einsum("sa,asj,sja->sj", pi, mdp.transitions, raw)
    I = np.eye(S)
    V = np.linalg.solve(I - gamma * W, r1)
    second = np.linalg.solve(I - gamma**2 * W, r2 + 2.0 * gamma * cross @ V)
    w0 = np.eye(S)[int(start)] if np.ndim(start) == 0 else np.asarray(start, dtype=float)
    mean = float(w0 @ V)
    return mean, float(w0 @ second - mean**2)


# ---------------------------------------------------------------------------
# presets


def maze_variance(corridor_a: float = 0.0, band_a: float = -5.0, corridor_b: float = -0.25,
                  band_b: float = -1.0, interior: float = -1.0, goal_reward: float = 5.0, p: float = 0.9,
                  gamma: float = 0.9) -> GridSpec:
    """10x10 maze with two equal-length corridors from the top-left start to the bottom-right goal.

    Corridor A runs along the top row and right column, pays ``corridor_a``
    per step and is lined on its inner side by a deep negative band
    (``band_a``) that slips fall into.  Corridor B runs along the left column
    and bottom row, pays the smaller ``corridor_b`` and is lined by the
    shallower ``band_b``.  The walled-off centre carries ``interior``.  The
    goal is non-absorbing and pays ``goal_reward`` on every step spent there.
    """
    table = np.full((10, 10), interior)
    table[1:9, 1] = band_b
    table[8, 1:9] = band_b
    table[1, 1:9] = band_a
    table[1:9, 8] = band_a
    table[0, :] = corridor_a
    table[:, 9] = corridor_a
    table[1:, 0] = corridor_b
    table[9, :9] = corridor_b
    table[9, 9] = goal_reward
    return GridSpec(10, 10, p, table, start=(0, 0), goal=(9, 9), goal_absorbing=False, gamma=gamma,
                    name="maze_variance")


def _kl_map(dark: float, light: float = 0.3, goal_reward: float = 1.0) -> tuple[np.ndarray, tuple]:
    table = np.full((10, 10), light)
    table[3:7, 3:8] = dark
    table[9, 9] = goal_reward
    dark_states = tuple(r * 10 + c for r in range(3, 7) for c in range(3, 8))
    return table, dark_states


def kl_prior_source(gamma: float = 0.9) -> GridSpec:
    """Source task for prior transfer: ``p = 0.4``, dark block ``-5``, light cells ``0.3``, goal ``1``."""
    table, dark = _kl_map(-5.0)
    return GridSpec(10, 10, 0.4, table, start=(0, 0), goal=(9, 9), goal_absorbing=False, gamma=gamma,
                    name="kl_prior_source", unrewarding=dark)


def kl_prior_drifted(gamma: float = 0.9) -> GridSpec:
    """Drifted task: ``p = 0.6`` and the dark block pays 0; otherwise identical to the source."""
    table, dark = _kl_map(0.0)
    return GridSpec(10, 10, 0.6, table, start=(0, 0), goal=(9, 9), goal_absorbing=False, gamma=gamma,
                    name="kl_prior_drifted", unrewarding=dark)


def small_grid(p: float = 0.8, gamma: float = 0.9) -> GridSpec:
    """5x5 test grid: ``-5`` pit band, ``0.3`` elsewhere, goal ``1`` in the bottom-right corner."""
    table = np.full((5, 5), 0.3)
    table[2, 1:4] = -5.0
    table[4, 4] = 1.0
    return GridSpec(5, 5, p, table, start=(0, 0), goal=(4, 4), goal_absorbing=False, gamma=gamma,
                    name="small_grid", unrewarding=(11, 12, 13))


def builtin_experiments(**maze_params) -> dict:
    """Named presets; keyword arguments are forwarded to :func:`maze_variance`."""
    return {
        "maze_variance": maze_variance(**maze_params),
        "kl_prior_source": kl_prior_source(),
        "kl_prior_drifted": kl_prior_drifted(),
        "small_grid": small_grid(),
    }


def render_ascii(spec: GridSpec, policy=None) -> str:
    """Reward map as text; ``S``/``G`` mark start and goal.  With a policy, greedy arrows are shown."""
    rewards = spec.reward_map()
    arrows = "^v<>"
    width = max(len(f"{x:g}") for x in rewards.ravel()) + 1
    lines = []
    for r in range(spec.height):
        cells = []
        for c in range(spec.width):
            s = r * spec.width + c
            if (r, c) == spec.start:
                tag = "S"
            elif (r, c) == spec.goal:
                tag = "G"
            elif policy is not None:
                tag = arrows[int(np.argmax(policy[s]))]
            else:
                tag = ""
            cells.append(f"{rewards[r, c]:g}{tag}".rjust(width + 1))
        lines.append(" ".join(cells))
    return "\n".join(lines)


def with_params(spec: GridSpec, **kw) -> GridSpec:
    return replace(spec, **kw)
