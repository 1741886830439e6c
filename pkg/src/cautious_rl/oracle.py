"""Deterministic reference solvers used to check the sampled methods."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linprog, minimize

from .mdp import TabularMDP, check_distribution, constraint_residual, uniform_xi
from .risk import BarrierViolation, RiskSpec, risk_subgradient, risk_value


@dataclass
class ValueIterationResult:
    v: np.ndarray
    policy: np.ndarray
    iterations: int
    history: list = field(default_factory=list, repr=False)


def bellman(mdp: TabularMDP, v) -> np.ndarray:
    """Q-values ``r_ia + gamma sum_j P_a(i, j) v_j``, shape ``(S, A)``."""
    return mdp.reward + mdp.gamma * np.einsum("aij,j->ia", mdp.transitions, v)


def greedy_policy(mdp: TabularMDP, v, atol: float = 1e-12) -> np.ndarray:
    """Deterministic greedy policy; near-ties go to the lowest action index."""
    q = bellman(mdp, v)
    best = np.argmax(q >= q.max(axis=1, keepdims=True) - atol, axis=1)
    pi = np.zeros_like(q)
    pi[np.arange(q.shape[0]), best] = 1.0
    return pi


def value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 1_000_000,
                    keep_history: bool = False) -> ValueIterationResult:
    """Iterate the optimal Bellman operator until ``||v - Bv||_inf <= tol``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    v = np.zeros(mdp.num_states)
    history = [v.copy()] if keep_history else []
    for it in range(1, max_iter + 1):
        nxt = bellman(mdp, v).max(axis=1)
        gap = np.abs(nxt - v).max()
        v = nxt
        if keep_history:
            history.append(v.copy())
        if gap <= tol:
            break
    return ValueIterationResult(v, greedy_policy(mdp, v), it, history)


def policy_values(mdp: TabularMDP, pi) -> np.ndarray:
    """Exact ``v_pi = (I - gamma P_pi)^{-1} r_pi``."""
    P_pi = np.einsum("sa,asj->sj", pi, mdp.transitions)
    r_pi = np.sum(pi * mdp.reward, axis=1)
    return np.linalg.solve(np.eye(mdp.num_states) - mdp.gamma * P_pi, r_pi)


# ---------------------------------------------------------------------------
# exact cautious solve


@dataclass
class OracleReport:
    v_star: np.ndarray
    lambda_star: Optional[np.ndarray]
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool
    constraint_residual: float = 0.0
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "v_star": self.v_star.tolist(),
            "lambda_star": None if self.lambda_star is None else self.lambda_star.tolist(),
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "constraint_residual": self.constraint_residual,
            "iterations": self.iterations,
            "converged": self.converged,
            "notes": list(self.notes),
        }


def _penalty(risk, c, lam):
    if risk is None or c == 0.0:
        return 0.0, 0.0
    return c * risk_value(risk, lam), c * risk_subgradient(risk, lam).ravel()


def _linear_program(mdp, xi, risk, c):
    """Exact LP for c = 0 and for the (piecewise-linear) peak risk; returns ``(lam, v)``."""
    S, A = mdp.num_states, mdp.num_actions
    n = S * A
    B = mdp.flow_matrix()
    r = mdp.reward.ravel()
    if risk is None or c == 0.0 or risk.kind == "none":
        res = linprog(-r, A_eq=B, b_eq=xi, bounds=(0, None), method="highs")
        extra = 0
    else:
        # epigraph variable t >= <c_j, lam> + d_j
        m = risk.mat.shape[0]
        cost = np.concatenate([-r, [c]])
        A_eq = np.hstack([B, np.zeros((S, 1))])
        A_ub = np.hstack([risk.mat, -np.ones((m, 1))])
        res = linprog(cost, A_ub=A_ub, b_ub=-risk.off, A_eq=A_eq, b_eq=xi,
                      bounds=[(0, None)] * n + [(None, None)], method="highs")
        extra = 1
    if res.status != 0:
        raise RuntimeError(f"linear program failed: {res.message}")
    lam = np.maximum(res.x[: len(res.x) - extra], 0.0)
    return lam, -np.asarray(res.eqlin.marginals)


def _barrier_start(mdp, xi, risk, lam0):
    """A start strictly inside the barrier domain, from an LP on the (affine) margins.

    Maximizes the smallest margin over the occupancy polytope; raises
    :class:`BarrierViolation` when even that optimum is at or below the floor.
    """
    if risk.kind == "log_barrier_safety":
        G = ((1.0 - mdp.gamma) * risk.vec[0])[None, :]
        g = np.array([1.0 - risk.scal[0]])
    else:
        G, g = risk.mat, risk.off
    margin = lambda x: float(np.min(G @ x - g))
    if margin(lam0) > risk.floor:
        return lam0
    n, m = G.shape[1], G.shape[0]
    cost = np.zeros(n + 1)
    cost[-1] = -1.0
    res = linprog(cost, A_ub=np.hstack([-G, np.ones((m, 1))]), b_ub=-g,
                  A_eq=np.hstack([mdp.flow_matrix(), np.zeros((mdp.num_states, 1))]), b_eq=xi,
                  bounds=[(0, None)] * n + [(None, None)], method="highs")
    if res.status != 0:
        raise RuntimeError(f"barrier phase-one program failed: {res.message}")
    best = np.maximum(res.x[:n], 0.0)
    if margin(best) <= risk.floor:
        raise BarrierViolation(margin(best), risk.floor)
    mid = 0.5 * (best + lam0)
    return mid if margin(mid) > risk.floor else best


def _kl_dual_newton(mdp, xi, risk, c, tol, max_iter=200):
    """Newton's method on the smooth dual of the pairwise-KL problem.

    For fixed ``v`` the inner maximizer is ``lam_hat = mu exp(z / (c (1-gamma)) - 1)``
    with ``z = r - B^T v``; the dual ``xi^T v + c sum_i lam_hat_i`` is minimized
    in ``v``.
    """
    gamma = mdp.gamma
    w = c * (1.0 - gamma)
    B = mdp.flow_matrix()
    r = mdp.reward.ravel()
    mu = np.maximum(risk.vec[0], risk.floor)
    _, v = _linear_program(mdp, xi, None, 0.0)

    def primal(v):
        return mu * np.exp((r - B.T @ v) / w - 1.0) / (1.0 - gamma)

    def dual(v):
        return xi @ v + c * (1.0 - gamma) * primal(v).sum()

    lam = primal(v)
    it = 0
    for it in range(1, max_iter + 1):
        grad = xi - B @ lam
        if np.abs(grad).sum() <= tol * 1e-3:
            break
        H = (B * (lam / w)) @ B.T
        step = np.linalg.solve(H, grad)
        # near the optimum dual values stop resolving progress, so a full step
        # that shrinks the gradient is accepted before falling back to Armijo
        t = 1.0
        if np.abs(xi - B @ primal(v - step)).sum() >= np.abs(grad).sum():
            f0 = dual(v)
            while t > 1e-12 and dual(v - t * step) > f0 - 0.25 * t * grad @ step:
                t *= 0.5
        v = v - t * step
        lam = primal(v)
    return lam, v, it


def _augmented_lagrangian(mdp, xi, risk, c, tol, max_outer, kappa, lam):
    S = mdp.num_states
    B = mdp.flow_matrix()
    r = mdp.reward.ravel()
    n = lam.size
    v = np.zeros(S)
    kappa = kappa * max(1.0, c)

    def neg_al(x):
        h = xi - B @ x
        try:
            pen, pgrad = _penalty(risk, c, x)
        except BarrierViolation:
            return np.inf, np.zeros_like(x)
        val = x @ r - pen + v @ h - 0.5 * kappa * h @ h
        grad = r - pgrad - B.T @ v + kappa * (B.T @ h)
        return -val, -grad

    prev = np.inf
    it = 0
    for it in range(1, max_outer + 1):
        res = minimize(neg_al, lam, jac=True, method="L-BFGS-B", bounds=[(0.0, None)] * n,
                       options={"ftol": 1e-16, "gtol": tol * 1e-2, "maxiter": 20_000, "maxcor": 30})
        lam = res.x
        h = xi - B @ lam
        v = v - kappa * h
        viol = np.abs(h).sum()
        if viol <= tol * 1e-1 and kkt_residual(mdp, lam.reshape(mdp.num_states, -1), v, risk, c, xi) <= tol:
            break
        if viol > 0.25 * prev:
            kappa = min(kappa * 10.0, 1e8)
        prev = viol
    return lam, v, it


def _active_set_polish(mdp, xi, risk, c, lam, v, tol, max_iter=30):
    """Newton refinement of the KKT system on the free coordinates of ``lam``.

    The free set starts as the coordinates the augmented-Lagrangian solve left
    positive; coordinates driven negative are dropped and bound coordinates
    with negative reduced cost are released.  The risk Jacobian is taken by
    central differences of the gradient.  The best point seen is returned.
    """
    S, A = mdp.num_states, mdp.num_actions
    B = mdp.flow_matrix()
    r = mdp.reward.ravel()
    n = lam.size

    def score(x, w):
        try:
            return kkt_residual(mdp, x.reshape(S, A), w, risk, c, xi)
        except BarrierViolation:
            return np.inf

    best = (score(lam, v), lam, v)
    free = lam > 1e-8 * max(lam.max(), 1.0)
    h = 1e-7
    for _ in range(max_iter):
        if best[0] <= tol * 1e-2:
            break
        idx = np.flatnonzero(free)
        k = idx.size
        try:
            grad = _penalty(risk, c, lam)[1]
            J = np.empty((n, k))
            for j, i in enumerate(idx):
                up, dn = lam.copy(), lam.copy()
                up[i] += h
                dn[i] -= h
                J[:, j] = (_penalty(risk, c, up)[1] - _penalty(risk, c, dn)[1]) / (2 * h)
        except BarrierViolation:
            break
        # unknowns (lam_F, v): r_F - grad_F - B_F^T v = 0 and B lam = xi
        Bf = B[:, idx]
        F = np.concatenate([r[idx] - grad[idx] - Bf.T @ v, xi - B @ lam])
        K = np.block([[-J[idx], -Bf.T], [-Bf, np.zeros((S, S))]])
        try:
            step = np.linalg.lstsq(K, -F, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        new_lam = lam.copy()
        new_lam[idx] += step[:k]
        new_lam[~free] = 0.0
        new_v = v + step[k:]
        dropped = new_lam < 0.0
        new_lam = np.maximum(new_lam, 0.0)
        try:
            slack = B.T @ new_v - r + _penalty(risk, c, new_lam)[1]
        except BarrierViolation:
            break
        released = (~free) & (slack < -tol)
        lam, v = new_lam, new_v
        free = (free & ~dropped) | released
        sc = score(lam, v)
        if sc < best[0]:
            best = (sc, lam, v)
    return best[1], best[2]


def exact_cautious_solve(mdp: TabularMDP, risk: Optional[RiskSpec] = None, c: Optional[float] = None, xi=None,
                         tol: float = 1e-9, max_outer: int = 100, kappa: float = 10.0,
                         lambda0=None) -> OracleReport:
    """Maximize ``<lam, r> - c rho(lam)`` over the exact occupancy polytope.

    The method depends on the risk: a linear program (HiGHS) when ``c = 0``
    or for the piecewise-linear peak risk, Newton's method on the smooth dual
    for the pairwise KL prior, and otherwise an augmented-Lagrangian loop
    whose bound-constrained inner problems are solved with L-BFGS-B.  The
    returned ``v_star`` is the multiplier of the flow constraints.
    """
    S, A, gamma = mdp.num_states, mdp.num_actions, mdp.gamma
    if risk is not None and not risk.convex:
        raise ValueError(f"exact solve needs a convex risk, got {risk.kind!r}")
    c = (0.0 if risk is None else risk.c) if c is None else float(c)
    xi = uniform_xi(S) if xi is None else check_distribution(xi, S)
    n = S * A
    notes = []
    if risk is None or c == 0.0 or risk.kind in ("none", "peak"):
        lam, v = _linear_program(mdp, xi, risk, c)
        it, method = 1, "linear_program"
        if risk is not None and risk.kind == "peak" and c != 0.0:
            notes.append("peak risk is nonsmooth: KKT residual uses the tie-broken subgradient and may overestimate")
    elif risk.kind == "kl_prior" and not risk.scal[0]:
        lam, v, it = _kl_dual_newton(mdp, xi, risk, c, tol)
        method = "kl_dual_newton"
    else:
        lam0 = np.full(n, 1.0 / ((1.0 - gamma) * n)) if lambda0 is None else np.array(lambda0, dtype=float).ravel()
        if risk.kind in ("log_barrier_safety", "multi_job_barrier"):
            lam0 = _barrier_start(mdp, xi, risk, lam0)
        lam, v, it = _augmented_lagrangian(mdp, xi, risk, c, tol, max_outer, kappa, lam0)
        lam, v = _active_set_polish(mdp, xi, risk, c, lam, v, tol)
        method = "augmented_lagrangian"
    notes.append(f"method: {method}")
    lam_star = lam.reshape(S, A)
    pen = _penalty(risk, c, lam)[0]
    kkt = kkt_residual(mdp, lam_star, v, risk, c, xi)
    resid = constraint_residual(mdp, lam_star, xi)
    return OracleReport(v_star=v, lambda_star=lam_star, objective=float(lam @ mdp.reward.ravel() - pen),
                        kkt_residual=kkt, iterations=it, converged=bool(kkt <= tol), constraint_residual=resid,
                        notes=notes)


def kkt_residual(mdp: TabularMDP, lam, v, risk: Optional[RiskSpec] = None, c: Optional[float] = None,
                 xi=None) -> float:
    """``max(constraint residual, max_sa |min(lam_sa, (e_s - gamma P_as)^T v - r_sa + c g_sa)|)``."""
    S, A = mdp.num_states, mdp.num_actions
    lam = np.asarray(lam, dtype=float).reshape(S, A)
    c = (0.0 if risk is None else risk.c) if c is None else float(c)
    slack = (mdp.flow_matrix().T @ np.asarray(v, dtype=float)).reshape(S, A) - mdp.reward
    if risk is not None and c != 0.0:
        slack = slack + c * risk_subgradient(risk, lam, strict=False)
    comp = np.abs(np.minimum(lam, slack)).max()
    return float(max(constraint_residual(mdp, lam, xi), comp))


def lemma1_bound(gamma: float, c: float, sigma: float) -> float:
    """Radius ``(1 + c sigma)/(1 - gamma)`` of the ball that contains ``v*``."""
    return (1.0 + c * sigma) / (1.0 - gamma)


def lemma1_bound_check(mdp: TabularMDP, risk: Optional[RiskSpec] = None, c: Optional[float] = None, xi=None,
                       tol: float = 1e-6, report: Optional[OracleReport] = None) -> bool:
    """Whether the exact multipliers satisfy ``||v*||_inf <= (1 + c sigma)/(1 - gamma) + tol``."""
    c = (0.0 if risk is None else risk.c) if c is None else float(c)
    if report is None:
        report = exact_cautious_solve(mdp, risk, c, xi)
    sigma = 0.0 if risk is None else risk.sigma
    return bool(np.abs(report.v_star).max() <= lemma1_bound(mdp.gamma, c, sigma) + tol)
