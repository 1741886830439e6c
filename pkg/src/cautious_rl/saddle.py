"""Stochastic primal-dual solver for the risk-penalized occupancy saddle problem.

The problem is ``max_lam min_v L(v, lam)`` with

    L(v, lam) = <lam, r> - c rho(lam) + <xi, v> + sum_a lam_a^T (gamma P_a - I) v,

over ``lam`` in the box ``{lam >= 0, sum lam = 1/(1-gamma)}`` and ``v`` in the
sup-norm ball of radius ``2C``, ``C = (1 + c sigma)/(1 - gamma)``.  Each
iteration samples one transition from a generative model, takes a projected
gradient step on ``v`` and a multiplicative (KL-proximal) step on ``lam``, and
the returned point is the average of the iterates.

Two backends share the same random streams: ``"python"`` composes the public
step functions one iteration at a time, ``"numba"`` runs a fused kernel.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numba
import numpy as np

from .generative import GenerativeModel
from .mdp import check_distribution, constraint_residual, policy_from_occupancy, uniform_xi
from .risk import BarrierViolation, RiskSpec, grad_into, kl_divergence, risk_subgradient, risk_value


class SolverError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters of one stochastic solve.

    With ``auto_params`` the step sizes and shifts follow the worst-case
    schedule of :func:`default_parameters`; any of ``alpha``, ``beta``, ``M1``,
    ``M2`` given explicitly overrides its scheduled value.  ``alpha_scale`` and
    ``beta_scale`` multiply the resolved steps.  ``c`` overrides the risk's own
    weight when set.
    """

    T: int = 10_000
    delta: float = 0.1
    alpha: Optional[float] = None
    beta: Optional[float] = None
    M1: Optional[float] = None
    M2: Optional[float] = None
    auto_params: bool = True
    alpha_scale: float = 1.0
    beta_scale: float = 1.0
    c: Optional[float] = None
    seed: int = 0
    xi: Optional[tuple] = None
    record_every: int = 0
    backend: str = "numba"
    store_iterates: bool = False
    lambda_init: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    v_init: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def validate(self):
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError("T must be a positive integer")
        if not 0.0 < self.delta < 0.5:
            raise ConfigError("delta must lie in (0, 1/2)")
        for name in ("alpha", "beta"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise ConfigError(f"{name} must be positive")
        if not self.auto_params and None in (self.alpha, self.beta, self.M1, self.M2):
            raise ConfigError("alpha, beta, M1 and M2 are required when auto_params is off")
        if self.alpha_scale <= 0 or self.beta_scale <= 0:
            raise ConfigError("step scales must be positive")
        if self.c is not None and self.c < 0:
            raise ConfigError("c must be nonnegative")
        if self.record_every < 0:
            raise ConfigError("record_every must be nonnegative")
        if self.backend not in ("numba", "python"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        return self

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("lambda_init", "v_init")}
        d["xi"] = None if self.xi is None else list(self.xi)
        d["warm_start"] = self.lambda_init is not None or self.v_init is not None
        return d


class TransitionSample(NamedTuple):
    s: int
    a: int
    s_next: int
    r_hat: float
    s_bar: int


@dataclass(frozen=True)
class MetricsRecord:
    t: int
    objective: float
    residual_l1: float
    return_raw: float
    kl_to_prior: Optional[float] = None
    phi: Optional[float] = None
    wall_ms: float = 0.0

    FIELDS = ("t", "objective", "residual_l1", "return_raw", "kl_to_prior", "phi", "wall_ms")

    def as_row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]


@dataclass
class SolveResult:
    lambda_bar: np.ndarray
    v_bar: np.ndarray
    policy: np.ndarray
    metrics: list
    diagnostics: dict
    params: dict
    lambda_last: np.ndarray = None
    v_last: np.ndarray = None
    iterates: Optional[dict] = None


# ---------------------------------------------------------------------------
# single-step operations


def default_parameters(num_states: int, num_actions: int, gamma: float, c: float, sigma: float, T: int):
    """Worst-case schedule ``(alpha, beta, M1, M2)`` for a budget of ``T`` samples."""
    n = num_states * num_actions
    k = 1.0 + c * sigma
    M1 = 4.0 * k / (1.0 - gamma)
    M2 = c * sigma
    beta = (1.0 - gamma) / k * math.sqrt(math.log(n) / (T * n)) if n > 1 else (1.0 - gamma) / k / math.sqrt(T)
    alpha = math.sqrt(num_states / T) * k
    return alpha, beta, M1, M2


def exploration_mixture(lam, delta: float, gamma: float) -> np.ndarray:
    """``zeta = (1 - delta)(1 - gamma) lam + delta / n``; every pair gets at least ``delta / n``."""
    lam = np.asarray(lam, dtype=float)
    return (1.0 - delta) * (1.0 - gamma) * lam + delta / lam.size


def primal_gradient_estimate(sample: TransitionSample, lam, zeta, gamma: float) -> np.ndarray:
    """Unbiased estimate of ``grad_v L = xi + sum_a (gamma P_a^T - I) lam_a``."""
    lam = np.asarray(lam, dtype=float)
    g = np.zeros(lam.shape[0])
    ratio = lam[sample.s, sample.a] / zeta[sample.s, sample.a]
    g[sample.s_bar] += 1.0
    g[sample.s_next] += ratio * gamma
    g[sample.s] -= ratio
    return g


def dual_increment(sample: TransitionSample, v, lam, zeta, risk: RiskSpec, M1: float, M2: float,
                   c: Optional[float] = None, gamma: Optional[float] = None) -> np.ndarray:
    """Shifted stochastic supergradient of ``L`` in ``lam``.

    Its expectation is ``d_lam L - (M1 + M2)``.  ``c`` defaults to ``risk.c``.
    """
    c = risk.c if c is None else c
    gamma = risk.gamma if gamma is None else gamma
    z = zeta[sample.s, sample.a]
    if not z > 0:
        raise SolverError("sampled pair has zero probability under the exploration mixture")
    D = np.full(np.shape(lam), -M2, dtype=float)
    if c != 0.0:
        D -= c * risk_subgradient(risk, lam, strict=False)
    D[sample.s, sample.a] += (sample.r_hat + gamma * v[sample.s_next] - v[sample.s] - M1) / z
    return D


def primal_step(v, g, alpha: float, C: float) -> np.ndarray:
    """Projected step onto the ball ``||v||_inf <= 2C``."""
    return np.clip(np.asarray(v, dtype=float) - alpha * np.asarray(g, dtype=float), -2.0 * C, 2.0 * C)


def dual_step(lam, Delta, beta: float, gamma: float) -> np.ndarray:
    """``lam * exp(beta Delta)`` renormalized to mass ``1/(1-gamma)``."""
    lam = np.asarray(lam, dtype=float)
    if not lam.any():
        raise SolverError("degenerate iterate: occupancy measure is identically zero")
    x = beta * np.asarray(Delta, dtype=float)
    w = lam * np.exp(x - x.max())
    return w / ((1.0 - gamma) * w.sum())


def _inverse_cdf(weights, u):
    cdf = np.cumsum(weights)
    return min(int(np.searchsorted(cdf, u * cdf[-1], side="right")), cdf.shape[0] - 1)


# ---------------------------------------------------------------------------
# fused kernel


@numba.njit(cache=True)
def _inv_cdf(cdf, u):
    target = u * cdf[-1]
    lo, hi = 0, cdf.shape[0]
    while lo < hi:  # first index with cdf > target
        mid = (lo + hi) // 2
        if cdf[mid] <= target:
            lo = mid + 1
        else:
            hi = mid
    return min(lo, cdf.shape[0] - 1)


@numba.njit(cache=True, nogil=True)
def _run_block(lam, v, lbar, vbar, t0, u_solver, u_model, xi_cdf, P_cdf, rtab, gamma, delta, alpha, beta,
               M1, M2, c, C, code, floor, vec, mat, off, scal, num_actions, diag, lam_store, v_store):
    n = lam.shape[0]
    S = v.shape[0]
    A = num_actions
    zeta = np.empty(n)
    cdf = np.empty(n)
    g = np.zeros(n)
    D = np.empty(n)
    zfloor = delta / n
    w = 1.0 - gamma
    for b in range(u_solver.shape[0]):
        t = t0 + b + 1
        # accumulate the running averages with the current iterate
        for i in range(n):
            lbar[i] += (lam[i] - lbar[i]) / t
        for i in range(S):
            vbar[i] += (v[i] - vbar[i]) / t
        if lam_store.shape[0] > 0:
            for i in range(n):
                lam_store[b, i] = lam[i]
            for i in range(S):
                v_store[b, i] = v[i]

        mass = 0.0
        lmin = np.inf
        acc = 0.0
        for i in range(n):
            mass += lam[i]
            lmin = min(lmin, lam[i])
            zeta[i] = (1.0 - delta) * w * lam[i] + zfloor
            acc += zeta[i]
            cdf[i] = acc
        diag[0] = max(diag[0], abs(w * mass - 1.0))
        diag[1] = min(diag[1], lmin)
        vmax = 0.0
        for i in range(S):
            vmax = max(vmax, abs(v[i]))
        diag[4] = max(diag[4], vmax)

        k = _inv_cdf(cdf, u_solver[b, 0])
        s = k // A
        a = k - s * A
        sbar = _inv_cdf(xi_cdf, u_solver[b, 1])
        sn = _inv_cdf(P_cdf[a, s], u_model[b])
        r = rtab[s, sn, a]
        diag[2] = min(diag[2], zeta[k] - zfloor)

        if c != 0.0:
            grad_into(code, gamma, floor, vec, mat, off, scal, A, lam, g)
        for i in range(n):
            D[i] = -M2 - c * g[i] if c != 0.0 else -M2
        D[k] += (r + gamma * v[sn] - v[s] - M1) / zeta[k]

        ratio = lam[k] / zeta[k]
        v[sbar] -= alpha
        v[sn] -= alpha * ratio * gamma
        v[s] += alpha * ratio
        for i in range(S):
            v[i] = min(max(v[i], -2.0 * C), 2.0 * C)

        m = -np.inf
        for i in range(n):
            m = max(m, D[i])
        diag[3] = max(diag[3], m)
        tot = 0.0
        for i in range(n):
            lam[i] *= math.exp(beta * (D[i] - m))
            tot += lam[i]
        scale = 1.0 / (w * tot)
        for i in range(n):
            lam[i] *= scale


# ---------------------------------------------------------------------------
# driver


def resolve_parameters(mdp, risk: RiskSpec, config: SolverConfig) -> dict:
    c = risk.c if config.c is None else float(config.c)
    S, A = mdp.num_states, mdp.num_actions
    sched = default_parameters(S, A, mdp.gamma, c, risk.sigma, config.T) if config.auto_params else (None,) * 4
    pick = lambda given, auto: auto if given is None else float(given)  # noqa: E731
    alpha = pick(config.alpha, sched[0]) * config.alpha_scale
    beta = pick(config.beta, sched[1]) * config.beta_scale
    M1 = pick(config.M1, sched[2])
    M2 = pick(config.M2, sched[3])
    C = (1.0 + c * risk.sigma) / (1.0 - mdp.gamma)
    return {"alpha": alpha, "beta": beta, "M1": M1, "M2": M2, "C": C, "c": c, "sigma": risk.sigma,
            "delta": config.delta, "T": int(config.T)}


def _metrics(mdp, risk, c, lam_bar, xi, t, t_start):
    ret = float(np.sum(lam_bar * mdp.reward))
    try:
        obj = ret - (c * risk_value(risk, lam_bar) if c != 0.0 else 0.0)
    except BarrierViolation:
        obj = float("nan")
    kl = None
    if risk.kind == "kl_prior" and not risk.scal[0]:
        kl = kl_divergence((1.0 - mdp.gamma) * lam_bar, risk.vec[0].reshape(lam_bar.shape), risk.floor)
    return MetricsRecord(t=t, objective=obj, residual_l1=constraint_residual(mdp, lam_bar, xi),
                         return_raw=mdp.raw_return(ret), kl_to_prior=kl,
                         wall_ms=(time.perf_counter() - t_start) * 1e3)


def solve(generative: GenerativeModel, risk: RiskSpec, config: SolverConfig,
          callback: Optional[Callable[[int, np.ndarray], None]] = None) -> SolveResult:
    """Run the sampled primal-dual iteration for ``config.T`` steps.

    Randomness: the pair ``(s, a) ~ zeta`` and ``s_bar ~ xi`` come from
    ``default_rng(config.seed)``; next states come from ``generative.rng``.
    ``callback(t, lam_bar)`` is called at every recorded step with a copy of
    the running average, shaped ``(S, A)``.
    """
    config.validate()
    mdp = generative.mdp
    S, A, gamma = mdp.num_states, mdp.num_actions, mdp.gamma
    if (risk.num_states, risk.num_actions) != (S, A) or abs(risk.gamma - gamma) > 0:
        raise ConfigError("risk dimensions or discount do not match the MDP")
    xi = uniform_xi(S) if config.xi is None else check_distribution(np.asarray(config.xi, dtype=float), S)
    prm = resolve_parameters(mdp, risk, config)
    alpha, beta, M1, M2, C, c = (prm[k] for k in ("alpha", "beta", "M1", "M2", "C", "c"))
    if not (alpha > 0 and beta > 0):
        raise ConfigError("resolved step sizes must be positive")
    n, T = S * A, int(config.T)

    lam = np.full(n, 1.0 / ((1.0 - gamma) * n))
    if config.lambda_init is not None:
        lam = np.array(config.lambda_init, dtype=float).ravel()
        if lam.shape != (n,) or (lam < 0).any() or not lam.any():
            raise ConfigError("lambda_init must be a nonnegative nonzero (S, A) table")
        lam /= (1.0 - gamma) * lam.sum()
    v = np.zeros(S) if config.v_init is None else np.clip(np.array(config.v_init, dtype=float), -2 * C, 2 * C)
    if v.shape != (S,):
        raise ConfigError("v_init must have shape (S,)")
    lbar, vbar = np.zeros(n), np.zeros(S)
    diag = np.array([0.0, np.inf, np.inf, -np.inf, 0.0])
    rng = np.random.default_rng(config.seed)
    record = config.record_every or T
    chunk = min(record, 8192)
    store_l = np.zeros((T if config.store_iterates else 0, n))
    store_v = np.zeros((T if config.store_iterates else 0, S))
    metrics = []
    t_start = time.perf_counter()
    xi_cdf = np.cumsum(xi)
    cr = risk.with_c(c) if c != risk.c else risk

    t = 0
    next_record = record
    while t < T:
        B = min(chunk, T - t, next_record - t)
        u_solver = rng.random((B, 2))
        if config.backend == "numba":
            u_model = generative.rng.random(B)
            sl = slice(t, t + B) if config.store_iterates else slice(0, 0)
            _run_block(lam, v, lbar, vbar, t, u_solver, u_model, xi_cdf, generative.cdf, generative.reward_table,
                       gamma, config.delta, alpha, beta, M1, M2, c, C, risk.code, risk.floor, risk.vec, risk.mat,
                       risk.off, risk.scal, A, diag, store_l[sl], store_v[sl])
        else:
            lam, v = _python_block(generative, cr, lam, v, lbar, vbar, t, u_solver, xi_cdf, prm, diag,
                                   store_l, store_v, config.store_iterates)
        t += B
        if t == next_record or t == T:
            metrics.append(_metrics(mdp, cr, c, lbar.reshape(S, A), xi, t, t_start))
            if callback is not None:
                callback(t, lbar.reshape(S, A).copy())
            next_record = min(next_record + record, T) if t == next_record else next_record

    diagnostics = {
        "max_mass_error": float(diag[0]),
        "min_lambda": float(diag[1]),
        "min_zeta_margin": float(diag[2]),
        "max_delta": float(diag[3]),
        "max_v_inf": float(diag[4]),
        "v_radius": 2.0 * C,
        "wall_ms": (time.perf_counter() - t_start) * 1e3,
    }
    lam_bar = lbar.reshape(S, A)
    iterates = {"lambda": store_l.reshape(T, S, A), "v": store_v} if config.store_iterates else None
    return SolveResult(lambda_bar=lam_bar, v_bar=vbar, policy=policy_from_occupancy(lam_bar), metrics=metrics,
                       diagnostics=diagnostics, params=prm, lambda_last=lam.reshape(S, A), v_last=v,
                       iterates=iterates)


def _python_block(generative, risk, lam, v, lbar, vbar, t0, u_solver, xi_cdf, prm, diag, store_l, store_v, store):
    mdp = generative.mdp
    S, A, gamma = mdp.num_states, mdp.num_actions, mdp.gamma
    n = S * A
    delta = prm["delta"]
    lam2 = lam.reshape(S, A)
    for b in range(u_solver.shape[0]):
        t = t0 + b + 1
        lbar += (lam2.ravel() - lbar) / t
        vbar += (v - vbar) / t
        if store:
            store_l[t - 1] = lam2.ravel()
            store_v[t - 1] = v
        zeta = exploration_mixture(lam2, delta, gamma)
        diag[0] = max(diag[0], abs((1.0 - gamma) * lam2.sum() - 1.0))
        diag[1] = min(diag[1], lam2.min())
        diag[4] = max(diag[4], np.abs(v).max())
        k = _inverse_cdf(zeta.ravel(), u_solver[b, 0])
        s, a = divmod(k, A)
        s_bar = min(int(np.searchsorted(xi_cdf, u_solver[b, 1] * xi_cdf[-1], side="right")), S - 1)
        s_next, r_hat = generative.sample(s, a)
        sample = TransitionSample(s, a, s_next, r_hat, s_bar)
        diag[2] = min(diag[2], zeta[s, a] - delta / n)
        D = dual_increment(sample, v, lam2, zeta, risk, prm["M1"], prm["M2"], c=prm["c"], gamma=gamma)
        g = primal_gradient_estimate(sample, lam2, zeta, gamma)
        diag[3] = max(diag[3], D.max())
        v = primal_step(v, g, prm["alpha"], prm["C"])
        lam2 = dual_step(lam2, D, prm["beta"], gamma)
    return lam2.ravel().copy(), v


def with_overrides(config: SolverConfig, **kw) -> SolverConfig:
    return replace(config, **kw)
