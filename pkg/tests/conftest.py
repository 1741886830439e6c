import numpy as np
import pytest

from cautious_rl.mdp import TabularMDP
from cautious_rl.risk import risk_subgradient
from cautious_rl.saddle import TransitionSample, dual_increment, exploration_mixture, primal_gradient_estimate


def random_mdp(rng, S=3, A=2, gamma=0.9, per_transition=True):
    """Dense random MDP with rewards already in [0, 1]."""
    P = rng.random((A, S, S)) + 0.05
    P /= P.sum(axis=2, keepdims=True)
    if per_transition:
        return TabularMDP.from_transition_rewards(P, rng.random((S, S, A)), gamma)
    return TabularMDP.from_expected_rewards(P, rng.random((S, A)), gamma)


def random_policy(rng, S, A):
    pi = rng.random((S, A)) + 0.05
    return pi / pi.sum(axis=1, keepdims=True)


def random_occupancy(rng, S, A, gamma, low=0.05):
    lam = rng.random((S, A)) + low
    return lam / ((1.0 - gamma) * lam.sum())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def brute_force_projection(x):
    """Simplex projection by trying every support set and keeping the KKT-consistent one."""
    from itertools import combinations

    x = np.asarray(x, dtype=float)
    n = x.size
    best, best_dist = None, np.inf
    for k in range(1, n + 1):
        for support in combinations(range(n), k):
            idx = list(support)
            theta = (x[idx].sum() - 1.0) / k
            mu = np.zeros(n)
            mu[idx] = x[idx] - theta
            if (mu[idx] < -1e-13).any():
                continue
            outside = np.setdiff1d(np.arange(n), idx)
            if outside.size and (x[outside] - theta > 1e-12).any():
                continue
            dist = np.sum((mu - x) ** 2)
            if dist < best_dist:
                best, best_dist = np.maximum(mu, 0.0), dist
    return best


def enumerate_expectations(mdp, risk, lam, v, xi, delta, M1, M2):
    """Exact expectations of both estimators over every (s, a, s', s_bar)."""
    S, A = mdp.num_states, mdp.num_actions
    zeta = exploration_mixture(lam, delta, mdp.gamma)
    Eg, ED = np.zeros(S), np.zeros((S, A))
    for s in range(S):
        for a in range(A):
            for j in range(S):
                for sb in range(S):
                    w = zeta[s, a] * mdp.transitions[a, s, j] * xi[sb]
                    if w == 0.0:
                        continue
                    smp = TransitionSample(s, a, j, mdp.transition_reward[s, j, a], sb)
                    Eg += w * primal_gradient_estimate(smp, lam, zeta, mdp.gamma)
                    ED += w * dual_increment(smp, v, lam, zeta, risk, M1, M2)
    return Eg, ED


def lagrangian_gradients(mdp, risk, lam, v, xi):
    g = mdp.gamma
    grad_v = xi.copy()
    grad_l = mdp.reward - v[:, None] - risk.c * risk_subgradient(risk, lam)
    for a in range(mdp.num_actions):
        grad_v += g * mdp.transitions[a].T @ lam[:, a] - lam[:, a]
        grad_l[:, a] += g * mdp.transitions[a] @ v
    return grad_v, grad_l


_VERDICTS = []


@pytest.fixture
def verdict(request):
    """Print one PASS/FAIL line for an acceptance criterion and assert it held."""

    def report(ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} {request.node.name}: {detail}"
        print(line)
        _VERDICTS.append(line)
        assert ok, detail

    return report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
