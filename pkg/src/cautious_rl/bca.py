"""Block coordinate ascent for the variance-penalized problem.

The variance risk is nonconvex in ``lam``, so the solver works on the surrogate

    Phi(lam, mu) = <lam, r> - c (<lam_hat, r>^2 - 2 <mu, r><lam_hat, r> + <mu, R>) - (M/2) ||mu - lam_hat||^2,

which is concave in each block.  The ``mu`` block has a closed form (a simplex
projection); the ``lam`` block is a convex risk-penalized problem handed to
the stochastic saddle solver.  At ``mu = lam_hat`` the surrogate equals the
variance-penalized objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numba
import numpy as np

from .generative import GenerativeModel
from .mdp import TabularMDP, constraint_residual
from .risk import RiskError, RiskSpec, bca_surrogate_risk, sigma_default
from .saddle import ConfigError, SolverConfig, SolverError, solve


@dataclass(frozen=True)
class BcaConfig:
    """Outer-loop settings.  ``M`` defaults to ``c``.

    ``literal_step`` switches the ``mu`` step to the literal ``2/M`` scaling
    (see :func:`mu_update`).  ``certify_inner`` solves every ``lam`` block
    exactly as well, to measure the inner accuracy ``eps_inner``.
    """

    K: int = 10
    c: float = 1.0
    M: Optional[float] = None
    inner: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    warm_start: bool = False
    literal_step: bool = False
    certify_inner: bool = False

    @property
    def M_value(self) -> float:
        return float(self.c if self.M is None else self.M)

    def validate(self):
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError("K must be a positive integer")
        if not self.c > 0:
            raise ConfigError("c must be positive for the variance surrogate")
        if not self.M_value > 0:
            raise ConfigError("M must be positive")
        self.inner.validate()
        return self

    def to_dict(self) -> dict:
        return {"K": self.K, "c": self.c, "M": self.M_value, "seed": self.seed, "warm_start": self.warm_start,
                "literal_step": self.literal_step, "certify_inner": self.certify_inner, "inner": self.inner.to_dict()}


@dataclass
class BcaResult:
    lambda_kstar: np.ndarray
    mu_kstar: np.ndarray
    k_star: int
    history: list
    lambdas: list = field(repr=False, default_factory=list)
    mus: list = field(repr=False, default_factory=list)
    inner_results: list = field(repr=False, default_factory=list)


def surrogate_value(lam, mu, mdp: TabularMDP, c: float, M: float) -> float:
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float).reshape(lam.shape)
    lh = (1.0 - mdp.gamma) * lam
    r, R = mdp.reward, mdp.second_moment
    x = np.sum(lh * r)
    m = np.sum(mu * r)
    return float(np.sum(lam * r) - c * (x * x - 2.0 * m * x + np.sum(mu * R)) - 0.5 * M * np.sum((mu - lh) ** 2))


@numba.njit(cache=True)
def _project_sorted(x):
    n = x.shape[0]
    u = np.sort(x)[::-1]
    css = 0.0
    theta = 0.0
    for k in range(n):
        css += u[k]
        t = (css - 1.0) / (k + 1)
        if u[k] - t > 0.0:
            theta = t
    out = np.empty(n)
    for i in range(n):
        out[i] = max(x[i] - theta, 0.0)
    return out


def project_simplex(x) -> np.ndarray:
    """Euclidean projection onto ``{mu >= 0, sum mu = 1}`` by sorting and thresholding."""
    x = np.asarray(x, dtype=float)
    if not np.isfinite(x).all():
        raise ValueError("projection input must be finite")
    out = _project_sorted(np.ascontiguousarray(x.ravel()))
    # the threshold is exact up to round-off; one renormalization makes the mass exactly 1 to ~1 ulp
    out /= out.sum()
    return out.reshape(x.shape)


def mu_update(lam, mdp: TabularMDP, c: float, M: float, literal_step: bool = False) -> np.ndarray:
    """Maximizer of ``Phi(lam, .)`` over the simplex.

    ``project(lam_hat + (c/M)(2 <lam_hat, r> r - R))``.  With ``literal_step``
    the coefficient is ``2/M`` instead of ``c/M``; that variant is kept for
    comparison and is not the exact block maximizer unless ``c = 2``.
    """
    lh = (1.0 - mdp.gamma) * np.asarray(lam, dtype=float)
    coef = (2.0 if literal_step else c) / M
    x = np.sum(lh * mdp.reward)
    return project_simplex(lh + coef * (2.0 * x * mdp.reward - mdp.second_moment))


def _valid_surrogate_sigma(mu, mdp: TabularMDP, c: float, M: float) -> float:
    """A sup-norm bound on the surrogate-risk gradient that holds on the whole feasible box."""
    r = mdp.reward
    m = float(np.sum(mu * r))
    drift = 2.0 * max(m, 1.0 - m) * float(r.max())
    prox = (M / c) * max(1.0 - float(mu.min()), float(mu.max()))
    return (1.0 - mdp.gamma) * (drift + prox)


def lambda_subproblem_risk(mu, mdp: TabularMDP, c: float, M: float) -> RiskSpec:
    """Convex risk of the ``lam`` block for fixed ``mu``.

    ``rho(lam) = <lam_hat, r>^2 - 2 <mu, r><lam_hat, r> + <mu, R> + (M / 2c) ||lam_hat - mu||^2``
    so that ``<lam, r> - c rho(lam) = Phi(lam, mu)``.  Its ``sigma`` is the
    larger of ``(1 - gamma)(1 + M/c)`` and a bound that holds for every point
    of the feasible box given ``mu``.
    """
    if not c > 0:
        raise RiskError("surrogate risk undefined for c = 0")
    mu = np.asarray(mu, dtype=float).reshape(mdp.num_states, mdp.num_actions)
    sigma = max(sigma_default("bca_surrogate", mdp.gamma, M=M, c=c), _valid_surrogate_sigma(mu, mdp, c, M))
    return bca_surrogate_risk(mu, mdp, c, M, sigma=sigma)


def inner_T_schedule(num_states: int, num_actions: int, gamma: float, c: float, M: float, eps: float,
                     scale: float = 1.0, cap: Optional[int] = None) -> int:
    """Inner budget with the shape ``n log n (1 + (1-gamma)^2 (c^2 + M^2)) / ((1-gamma)^4 eps^2)``.

    ``scale`` absorbs the unspecified constant; ``cap`` bounds the result.
    """
    n = num_states * num_actions
    T = scale * n * math.log(max(n, 2)) * (1.0 + (1.0 - gamma) ** 2 * (c * c + M * M)) / ((1.0 - gamma) ** 4 * eps**2)
    T = max(1, int(math.ceil(T)))
    return T if cap is None else min(T, int(cap))


def bca_solve(mdp: TabularMDP, generative: GenerativeModel, config: BcaConfig) -> BcaResult:
    """Alternate the ``mu`` step and a sampled solve of the ``lam`` block for ``K`` rounds.

    History rows record ``Phi`` after every block step.  The output is the
    pair from a round ``k*`` drawn uniformly from ``1..K``.
    """
    config.validate()
    c, M, K = config.c, config.M_value, int(config.K)
    S, A, gamma = mdp.num_states, mdp.num_actions, mdp.gamma
    n = S * A
    lam = np.full((S, A), 1.0 / ((1.0 - gamma) * n))
    mu = np.full((S, A), 1.0 / n)
    seeds = np.random.SeedSequence(config.seed).generate_state(K + 1)
    lambdas, mus, inner_results = [lam], [mu], []
    history = [{"k": 0, "step": "init", "phi": surrogate_value(lam, mu, mdp, c, M),
                "residual_l1": constraint_residual(mdp, lam, _xi(config, S)), "eps_inner": None}]
    for k in range(K):
        mu = mu_update(lam, mdp, c, M, literal_step=config.literal_step)
        history.append({"k": k + 1, "step": "mu", "phi": surrogate_value(lam, mu, mdp, c, M),
                        "residual_l1": history[-1]["residual_l1"], "eps_inner": None})
        risk = lambda_subproblem_risk(mu, mdp, c, M)
        inner = replace(config.inner, seed=int(seeds[k]), c=None,
                        lambda_init=lam if (config.warm_start and k > 0) else None)
        try:
            res = solve(generative, risk, inner)
        except (SolverError, RiskError) as exc:
            raise SolverError(f"inner solve failed in outer iteration {k + 1}: {exc}") from exc
        lam = res.lambda_bar
        phi = surrogate_value(lam, mu, mdp, c, M)
        eps = None
        if config.certify_inner:
            from .oracle import exact_cautious_solve

            best = exact_cautious_solve(mdp, risk, c, xi=_xi(config, S), tol=1e-8)
            eps = abs(surrogate_value(best.lambda_star, mu, mdp, c, M) - phi)
        history.append({"k": k + 1, "step": "lambda", "phi": phi, "residual_l1": res.metrics[-1].residual_l1,
                        "eps_inner": eps})
        lambdas.append(lam)
        mus.append(mu)
        inner_results.append(res)
    k_star = int(np.random.default_rng(int(seeds[K])).integers(1, K + 1))
    return BcaResult(lambdas[k_star], mus[k_star], k_star, history, lambdas, mus, inner_results)


def phi_history(result: BcaResult, step: str = "lambda") -> np.ndarray:
    """``Phi`` after each ``lam`` step (``step="lambda"``) or each ``mu`` step."""
    return np.array([h["phi"] for h in result.history if h["step"] == step])


def _xi(config: BcaConfig, S: int):
    return None if config.inner.xi is None else np.asarray(config.inner.xi, dtype=float)
