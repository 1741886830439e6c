"""Caution risks rho(lam) defined on occupancy measures.

Every risk is described by an immutable :class:`RiskSpec`.  Values are computed
with numpy; gradients go through a single numba dispatcher (:func:`grad_into`)
that the stochastic solver also calls inside its inner loop, so the Python API
and the fast path share one implementation.

All risks see the normalized distribution ``lam_hat = (1 - gamma) * lam``.
Logarithm arguments are floored at ``spec.floor``; ``lam`` itself is never
modified.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np

NONE, KL_PRIOR, VARIANCE, LOG_BARRIER_SAFETY, MULTI_JOB_BARRIER, PEAK, BCA_SURROGATE, QUADRATIC_PRIOR = range(8)

KIND_CODES = {
    "none": NONE,
    "kl_prior": KL_PRIOR,
    "variance": VARIANCE,
    "log_barrier_safety": LOG_BARRIER_SAFETY,
    "multi_job_barrier": MULTI_JOB_BARRIER,
    "peak": PEAK,
    "bca_surrogate": BCA_SURROGATE,
    "quadratic_prior": QUADRATIC_PRIOR,
}
CONVEX_KINDS = frozenset(KIND_CODES) - {"variance"}


class RiskError(ValueError):
    pass


class BarrierViolation(RiskError):
    """A log-barrier argument fell to or below the floor."""

    def __init__(self, margin: float, floor: float):
        super().__init__(f"barrier violated: margin {margin:.6g} <= floor {floor:.3g}")
        self.margin = margin


def default_floor(num_states: int, num_actions: int) -> float:
    return min(1e-15, 1.0 / (num_states * num_actions))


@dataclass(frozen=True, eq=False)
class RiskSpec:
    """A configured caution risk.

    ``vec``, ``mat``, ``off`` and ``scal`` hold the kind-specific parameters in
    the flat layout consumed by :func:`grad_into`; ``params`` keeps the
    human-readable configuration for manifests.
    """

    kind: str
    num_states: int
    num_actions: int
    gamma: float
    c: float = 0.0
    sigma: float = 0.0
    floor: float = 1e-15
    params: dict = field(default_factory=dict)
    vec: np.ndarray = field(default=None, repr=False)
    mat: np.ndarray = field(default=None, repr=False)
    off: np.ndarray = field(default=None, repr=False)
    scal: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise RiskError(f"unknown risk kind {self.kind!r}")
        if self.c < 0:
            raise RiskError("risk weight c must be nonnegative")
        n = self.num_states * self.num_actions
        if not 0.0 < self.floor <= 1.0 / n:
            raise RiskError(f"floor must lie in (0, 1/(|S||A|)] = (0, {1.0 / n:.3g}]")
        defaults = {"vec": np.zeros((3, n)), "mat": np.zeros((1, n)), "off": np.zeros(1), "scal": np.zeros(4)}
        for name, value in defaults.items():
            arr = np.ascontiguousarray(value if getattr(self, name) is None else getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def code(self) -> int:
        return KIND_CODES[self.kind]

    @property
    def convex(self) -> bool:
        return self.kind in CONVEX_KINDS

    def with_c(self, c: float) -> "RiskSpec":
        return RiskSpec(self.kind, self.num_states, self.num_actions, self.gamma, c, self.sigma, self.floor,
                        self.params, self.vec, self.mat, self.off, self.scal)

    def kernel_args(self):
        return self.code, self.gamma, self.floor, self.vec, self.mat, self.off, self.scal, self.num_actions

    def sample_subgradient(self, lam, rng=None) -> np.ndarray:
        """Stochastic first-order oracle hook; the shipped oracle is exact."""
        return risk_subgradient(self, lam)

    def describe(self) -> dict:
        return {"kind": self.kind, "c": self.c, "sigma": self.sigma, "floor": self.floor, "params": self.params}


# ---------------------------------------------------------------------------
# gradient kernels


@numba.njit(cache=True)
def grad_into(code, gamma, floor, vec, mat, off, scal, num_actions, lam, out):
    """Write a subgradient of the risk at ``lam`` (flat, length S*A) into ``out``."""
    n = lam.shape[0]
    w = 1.0 - gamma
    if code == NONE:
        for i in range(n):
            out[i] = 0.0
    elif code == KL_PRIOR:
        if scal[0] != 0.0:
            S = n // num_actions
            for s in range(S):
                m = 0.0
                for a in range(num_actions):
                    m += lam[s * num_actions + a]
                m = max(w * m, floor)
                g = w * (1.0 + math.log(m / max(vec[0, s * num_actions], floor)))
                for a in range(num_actions):
                    out[s * num_actions + a] = g
        else:
            for i in range(n):
                out[i] = w * (1.0 + math.log(max(w * lam[i], floor) / max(vec[0, i], floor)))
    elif code == VARIANCE:
        x = 0.0
        for i in range(n):
            x += w * lam[i] * vec[0, i]
        for i in range(n):
            out[i] = w * (vec[1, i] - 2.0 * x * vec[0, i])
    elif code == LOG_BARRIER_SAFETY:
        x = 0.0
        for i in range(n):
            x += w * lam[i] * vec[0, i]
        margin = max(x - (1.0 - scal[0]), floor)
        for i in range(n):
            out[i] = -w * vec[0, i] / margin
    elif code == MULTI_JOB_BARRIER:
        for i in range(n):
            out[i] = 0.0
        for j in range(mat.shape[0]):
            x = 0.0
            for i in range(n):
                x += lam[i] * mat[j, i]
            margin = max(x - off[j], floor)
            for i in range(n):
                out[i] -= mat[j, i] / margin
    elif code == PEAK:
        best = -np.inf
        jbest = 0
        for j in range(mat.shape[0]):
            x = off[j]
            for i in range(n):
                x += lam[i] * mat[j, i]
            if x > best:
                best = x
                jbest = j
        for i in range(n):
            out[i] = mat[jbest, i]
    elif code == BCA_SURROGATE:
        x = 0.0
        m = 0.0
        for i in range(n):
            x += w * lam[i] * vec[0, i]
            m += vec[2, i] * vec[0, i]
        for i in range(n):
            out[i] = w * (2.0 * (x - m) * vec[0, i] + scal[0] * (w * lam[i] - vec[2, i]))
    elif code == QUADRATIC_PRIOR:
        for i in range(n):
            out[i] = w * (w * lam[i] - vec[0, i])


# ---------------------------------------------------------------------------
# values


def _flat(spec: RiskSpec, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    if lam.shape not in ((spec.num_states, spec.num_actions), (spec.num_states * spec.num_actions,)):
        raise RiskError(f"occupancy shape {lam.shape} does not match risk ({spec.num_states}, {spec.num_actions})")
    return np.ascontiguousarray(lam.ravel())


def _barrier_margins(spec: RiskSpec, lam: np.ndarray) -> np.ndarray:
    if spec.kind == "log_barrier_safety":
        return np.array([(1.0 - spec.gamma) * lam @ spec.vec[0] - (1.0 - spec.scal[0])])
    return spec.mat @ lam - spec.off


def risk_value(spec: RiskSpec, lam) -> float:
    lam = _flat(spec, lam)
    w = 1.0 - spec.gamma
    lh = w * lam
    kind = spec.kind
    if kind == "none":
        return 0.0
    if kind == "kl_prior":
        if spec.scal[0]:
            A = spec.num_actions
            m = lh.reshape(-1, A).sum(axis=1)
            mu = spec.vec[0, ::A]
        else:
            m, mu = lh, spec.vec[0]
        nz = m > 0
        return float(np.sum(m[nz] * np.log(np.maximum(m[nz], spec.floor) / np.maximum(mu[nz], spec.floor))))
    if kind == "variance":
        x = lh @ spec.vec[0]
        return float(lh @ spec.vec[1] - x * x)
    if kind in ("log_barrier_safety", "multi_job_barrier"):
        margins = _barrier_margins(spec, lam)
        if margins.min() <= spec.floor:
            raise BarrierViolation(float(margins.min()), spec.floor)
        return float(-np.log(margins).sum())
    if kind == "peak":
        return float(np.max(spec.mat @ lam + spec.off))
    if kind == "bca_surrogate":
        r, R, mu = spec.vec
        x, m = lh @ r, mu @ r
        return float(x * x - 2.0 * m * x + mu @ R + 0.5 * spec.scal[0] * np.sum((lh - mu) ** 2))
    if kind == "quadratic_prior":
        return float(0.5 * np.sum((lh - spec.vec[0]) ** 2))
    raise RiskError(f"unknown risk kind {kind!r}")


def risk_subgradient(spec: RiskSpec, lam, strict: bool = True) -> np.ndarray:
    """An element of the subdifferential, shaped ``(S, A)``.

    Peak-risk ties go to the lowest maximizing index.  With ``strict=False``
    barrier margins are floored instead of raising, which is what the sampled
    solver does.
    """
    flat = _flat(spec, lam)
    if strict and spec.kind in ("log_barrier_safety", "multi_job_barrier"):
        margins = _barrier_margins(spec, flat)
        if margins.min() <= spec.floor:
            raise BarrierViolation(float(margins.min()), spec.floor)
    out = np.empty_like(flat)
    grad_into(*spec.kernel_args(), flat, out)
    return out.reshape(spec.num_states, spec.num_actions)


def safety_mass(lam, safe_states, gamma: float) -> float:
    """Normalized occupancy mass on ``safe_states``: ``(1 - gamma) sum_{s in S_bar, a} lam_sa``."""
    lam = np.asarray(lam, dtype=float)
    idx = np.asarray(sorted(set(int(s) for s in safe_states)), dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= lam.shape[0]):
        raise RiskError("safe set contains states outside the MDP")
    return float((1.0 - gamma) * lam[idx].sum()) if idx.size else 0.0


def kl_divergence(p, q, floor: float = 0.0) -> float:
    """``sum p log(p / q)`` over the support of ``p``."""
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    nz = p > 0
    return float(np.sum(p[nz] * np.log(np.maximum(p[nz], floor) / np.maximum(q[nz], floor))))


def sigma_default(kind: str, gamma: float, **params) -> float:
    """A bound on ``sup ||subgradient||_inf`` over the feasible box.

    Kind-specific parameters: ``floor`` (kl_prior and the barriers),
    ``coefficients`` (peak), ``M`` and ``c`` (bca_surrogate), ``task_rewards``
    (multi_job_barrier), ``mask`` (log_barrier_safety).
    """
    w = 1.0 - gamma
    if kind == "none":
        return 0.0
    if kind == "kl_prior":
        return w * (1.0 + math.log(1.0 / params["floor"]))
    if kind == "peak":
        coef = np.asarray(params["coefficients"], dtype=float)
        return float(np.abs(coef.reshape(coef.shape[0], -1)).max())
    if kind == "bca_surrogate":
        return w * (1.0 + params["M"] / params["c"])
    if kind == "variance":
        return 3.0 * w
    if kind == "quadratic_prior":
        return w
    if kind == "log_barrier_safety":
        return w * float(np.max(params.get("mask", 1.0))) / params["floor"]
    if kind == "multi_job_barrier":
        tasks = np.asarray(params["task_rewards"], dtype=float)
        return float(np.abs(tasks.reshape(tasks.shape[0], -1)).max(axis=1).sum()) / params["floor"]
    raise RiskError(f"unknown risk kind {kind!r}")


# ---------------------------------------------------------------------------
# constructors


def _resolve_floor(floor, S, A):
    return default_floor(S, A) if floor is None else float(floor)


def no_risk(num_states: int, num_actions: int, gamma: float) -> RiskSpec:
    return RiskSpec("none", num_states, num_actions, gamma, floor=default_floor(num_states, num_actions))


def kl_prior(prior, gamma: float, c: float, *, marginal: bool = False, num_actions: Optional[int] = None,
             floor: Optional[float] = None, sigma: Optional[float] = None) -> RiskSpec:
    """``KL((1 - gamma) lam || prior)``.

    With ``marginal=True`` the prior is a state distribution ``(S,)`` and the
    risk compares it with the action-marginalized occupancy; ``num_actions``
    is then required.
    """
    prior = np.asarray(prior, dtype=float)
    if (prior < 0).any() or abs(prior.sum() - 1.0) > 1e-9:
        raise RiskError("prior must be a probability distribution")
    if marginal:
        if prior.ndim != 1 or num_actions is None:
            raise RiskError("marginal KL needs a state prior of shape (S,) and num_actions")
        S, A = prior.shape[0], int(num_actions)
        flat = np.repeat(prior, A)
    else:
        if prior.ndim != 2:
            raise RiskError("prior must have shape (S, A)")
        S, A = prior.shape
        flat = prior.ravel()
    floor = _resolve_floor(floor, S, A)
    vec = np.zeros((3, S * A))
    vec[0] = flat
    sigma = sigma_default("kl_prior", gamma, floor=floor) if sigma is None else sigma
    params = {"prior": prior.tolist(), "marginal": marginal}
    return RiskSpec("kl_prior", S, A, gamma, c, sigma, floor, params, vec=vec, scal=np.array([float(marginal), 0, 0, 0]))


def variance_risk(mdp, c: float, floor: Optional[float] = None) -> RiskSpec:
    """Per-step reward variance ``<lam_hat, R> - <lam_hat, r>^2`` (nonconvex)."""
    S, A = mdp.num_states, mdp.num_actions
    vec = np.zeros((3, S * A))
    vec[0] = mdp.reward.ravel()
    vec[1] = mdp.second_moment.ravel()
    return RiskSpec("variance", S, A, mdp.gamma, c, sigma_default("variance", mdp.gamma), _resolve_floor(floor, S, A),
                    {}, vec=vec)


def safety_barrier(safe_states, num_states: int, num_actions: int, gamma: float, delta: float, c: float,
                   floor: Optional[float] = None) -> RiskSpec:
    """``-log(lam(S_bar) - (1 - delta))``: stay in ``safe_states`` more than ``1 - delta`` of the time."""
    mask = np.zeros((num_states, num_actions))
    idx = sorted(set(int(s) for s in safe_states))
    mask[idx] = 1.0
    floor = _resolve_floor(floor, num_states, num_actions)
    vec = np.zeros((3, num_states * num_actions))
    vec[0] = mask.ravel()
    sigma = sigma_default("log_barrier_safety", gamma, floor=floor, mask=mask)
    return RiskSpec("log_barrier_safety", num_states, num_actions, gamma, c, sigma, floor,
                    {"safe_states": idx, "delta": delta}, vec=vec, scal=np.array([delta, 0, 0, 0]))


def multi_job_barrier(task_rewards, thresholds, gamma: float, c: float, floor: Optional[float] = None) -> RiskSpec:
    """``-sum_j log(<lam, r_j> - b_j)`` for task rewards ``(m, S, A)``."""
    tasks = np.asarray(task_rewards, dtype=float)
    b = np.asarray(thresholds, dtype=float).ravel()
    m, S, A = tasks.shape
    if b.shape != (m,):
        raise RiskError("need one threshold per task")
    floor = _resolve_floor(floor, S, A)
    sigma = sigma_default("multi_job_barrier", gamma, floor=floor, task_rewards=tasks)
    return RiskSpec("multi_job_barrier", S, A, gamma, c, sigma, floor,
                    {"task_rewards": tasks.tolist(), "thresholds": b.tolist()}, mat=tasks.reshape(m, -1), off=b)


def peak_risk(coefficients, gamma: float, c: float, offsets=None, floor: Optional[float] = None) -> RiskSpec:
    """``max_j <c_j, lam> + d_j`` for linear pieces ``c_j`` of shape ``(m, S, A)``."""
    coef = np.asarray(coefficients, dtype=float)
    m, S, A = coef.shape
    off = np.zeros(m) if offsets is None else np.asarray(offsets, dtype=float).ravel()
    return RiskSpec("peak", S, A, gamma, c, sigma_default("peak", gamma, coefficients=coef),
                    _resolve_floor(floor, S, A), {"coefficients": coef.tolist(), "offsets": off.tolist()},
                    mat=coef.reshape(m, -1), off=off)


def peak_exposure(danger_sets, num_states: int, num_actions: int, gamma: float, c: float) -> RiskSpec:
    """Worst-case long-run exposure ``max_j lam(S_j)`` to danger sets."""
    coef = np.zeros((len(danger_sets), num_states, num_actions))
    for j, states in enumerate(danger_sets):
        coef[j, sorted(set(int(s) for s in states))] = 1.0 - gamma
    return peak_risk(coef, gamma, c)


def peak_multitask(task_rewards, gamma: float, c: float) -> RiskSpec:
    """``max_j -<lam, r_j>``: penalize the worst task return."""
    return peak_risk(-np.asarray(task_rewards, dtype=float), gamma, c)


def quadratic_prior(prior, gamma: float, c: float, floor: Optional[float] = None) -> RiskSpec:
    """``0.5 ||(1 - gamma) lam - prior||^2``."""
    prior = np.asarray(prior, dtype=float)
    S, A = prior.shape
    vec = np.zeros((3, S * A))
    vec[0] = prior.ravel()
    return RiskSpec("quadratic_prior", S, A, gamma, c, sigma_default("quadratic_prior", gamma),
                    _resolve_floor(floor, S, A), {"prior": prior.tolist()}, vec=vec)


def bca_surrogate_risk(mu, mdp, c: float, M: float, sigma: Optional[float] = None) -> RiskSpec:
    """Convex risk of the BCA lambda-subproblem for fixed ``mu`` (see :mod:`cautious_rl.bca`)."""
    S, A = mdp.num_states, mdp.num_actions
    mu = np.asarray(mu, dtype=float).reshape(S, A)
    vec = np.zeros((3, S * A))
    vec[0] = mdp.reward.ravel()
    vec[1] = mdp.second_moment.ravel()
    vec[2] = mu.ravel()
    sigma = sigma_default("bca_surrogate", mdp.gamma, M=M, c=c) if sigma is None else sigma
    return RiskSpec("bca_surrogate", S, A, mdp.gamma, c, sigma, default_floor(S, A),
                    {"M": M, "mu": mu.tolist()}, vec=vec, scal=np.array([M / c, 0, 0, 0]))


# ---------------------------------------------------------------------------
# configuration


def _load_table(value, base_dir=None):
    if isinstance(value, str):
        from .mdp import load_occupancy

        path = Path(value)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        lam, gamma = load_occupancy(path)
        return lam * (1.0 - gamma)
    return np.asarray(value, dtype=float)


def risk_from_config(doc: dict, mdp, base_dir=None) -> RiskSpec:
    """Build a risk from ``{"kind": ..., "c": ..., "params": {...}}``.

    Prior tables may be inline arrays or paths to occupancy files (normalized
    on load).
    """
    if doc is None:
        return no_risk(mdp.num_states, mdp.num_actions, mdp.gamma)
    kind = doc.get("kind", "none")
    c = float(doc.get("c", 0.0))
    p = dict(doc.get("params", {}))
    floor = p.get("floor")
    S, A, g = mdp.num_states, mdp.num_actions, mdp.gamma
    if kind == "none":
        spec = no_risk(S, A, g).with_c(c)
    elif kind == "kl_prior":
        spec = kl_prior(_load_table(p["prior"], base_dir), g, c, marginal=bool(p.get("marginal", False)),
                        num_actions=A, floor=floor)
    elif kind == "quadratic_prior":
        spec = quadratic_prior(_load_table(p["prior"], base_dir), g, c, floor=floor)
    elif kind == "variance":
        spec = variance_risk(mdp, c, floor=floor)
    elif kind == "log_barrier_safety":
        spec = safety_barrier(p["safe_states"], S, A, g, float(p["delta"]), c, floor=floor)
    elif kind == "multi_job_barrier":
        spec = multi_job_barrier(p["task_rewards"], p["thresholds"], g, c, floor=floor)
    elif kind == "peak":
        if "danger_sets" in p:
            spec = peak_exposure(p["danger_sets"], S, A, g, c)
        elif "task_rewards" in p:
            spec = peak_multitask(p["task_rewards"], g, c)
        else:
            spec = peak_risk(p["coefficients"], g, c, offsets=p.get("offsets"))
    else:
        raise RiskError(f"unsupported risk kind in config: {kind!r}")
    if "sigma" in doc:
        spec = RiskSpec(spec.kind, S, A, g, spec.c, float(doc["sigma"]), spec.floor, spec.params,
                        spec.vec, spec.mat, spec.off, spec.scal)
    return spec


def risk_config_json(spec: RiskSpec) -> str:
    return json.dumps(spec.describe())
