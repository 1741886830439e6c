"""One test per acceptance criterion, each reporting a single PASS/FAIL line."""

import time
from pathlib import Path

import numpy as np
import pytest

from cautious_rl.bca import lambda_subproblem_risk, project_simplex
from cautious_rl.experiments import load_config, resolve_config, run_command
from cautious_rl.generative import GenerativeModel
from cautious_rl.gridworld import build_mdp, small_grid
from cautious_rl.mdp import constraint_residual, occupancy_from_policy
from cautious_rl.oracle import exact_cautious_solve, kkt_residual, lemma1_bound_check, value_iteration
from cautious_rl.risk import (
    kl_divergence,
    kl_prior,
    multi_job_barrier,
    no_risk,
    peak_exposure,
    quadratic_prior,
    risk_subgradient,
    risk_value,
    safety_barrier,
    variance_risk,
)
from cautious_rl.saddle import SolverConfig, solve

from conftest import (
    brute_force_projection,
    enumerate_expectations,
    lagrangian_gradients,
    random_mdp,
    random_occupancy,
    random_policy,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
GAMMA = 0.9
SEEDS = range(10)


def grid_prior(mdp):
    """Normalized occupancy of the uniform policy: a full-support KL prior."""
    S, A = mdp.num_states, mdp.num_actions
    return (1 - mdp.gamma) * occupancy_from_policy(mdp, np.full((S, A), 1.0 / A))


def neutral_runs(mdp, T):
    risk = no_risk(mdp.num_states, mdp.num_actions, mdp.gamma)
    return [solve(GenerativeModel(mdp, 1000 + s), risk, SolverConfig(T=T, seed=s)) for s in SEEDS]


@pytest.mark.slow
def test_risk_neutral_consistency(verdict):
    mdp = build_mdp(small_grid())
    target = float(np.full(mdp.num_states, 1 / mdp.num_states) @ value_iteration(mdp, tol=1e-12).v)
    t0 = time.perf_counter()
    runs = neutral_runs(mdp, 200_000)
    per_seed = (time.perf_counter() - t0) / len(runs)
    ret = np.mean([np.sum(r.lambda_bar * mdp.reward) for r in runs])
    resid = np.mean([constraint_residual(mdp, r.lambda_bar) for r in runs])
    rel = abs(ret - target) / abs(target)
    ok = rel <= 0.10 and resid <= 0.05 and per_seed <= 120
    verdict(ok, f"relative error {rel:.4f} (<= 0.10), residual {resid:.4f} (<= 0.05), {per_seed:.1f} s per seed")


@pytest.mark.slow
@pytest.mark.parametrize("risk_kind", ["none", "kl_prior"])
def test_rate_of_constraint_residual(risk_kind, verdict):
    mdp = build_mdp(small_grid())
    S, A = mdp.num_states, mdp.num_actions
    risk = no_risk(S, A, GAMMA) if risk_kind == "none" else kl_prior(grid_prior(mdp), GAMMA, 1.0)
    T = 50_000

    def mean_residual(budget):
        return np.mean([constraint_residual(mdp, solve(GenerativeModel(mdp, 1000 + s), risk,
                                                       SolverConfig(T=budget, seed=s)).lambda_bar) for s in SEEDS])

    r1, r4 = mean_residual(T), mean_residual(4 * T)
    ratio = r1 / r4
    verdict(1.4 <= ratio <= 3.0, f"residual {r1:.4f} at T={T}, {r4:.4f} at 4T, ratio {ratio:.3f} in [1.4, 3.0]")


def test_estimators_unbiased_by_enumeration(verdict):
    rng = np.random.default_rng(20)
    worst_g = worst_d = 0.0
    for _ in range(20):
        mdp = random_mdp(rng, 2, 2, GAMMA)
        risk = kl_prior(random_occupancy(rng, 2, 2, GAMMA) * (1 - GAMMA), GAMMA, float(rng.uniform(0, 3)))
        lam = random_occupancy(rng, 2, 2, GAMMA, low=0.01)
        C = (1 + risk.c * risk.sigma) / (1 - GAMMA)
        v = rng.uniform(-2 * C, 2 * C, size=2)
        xi = rng.dirichlet([1.0, 1.0])
        M1, M2 = 4 * C, risk.c * risk.sigma
        Eg, ED = enumerate_expectations(mdp, risk, lam, v, xi, 0.1, M1, M2)
        gv, gl = lagrangian_gradients(mdp, risk, lam, v, xi)
        worst_g = max(worst_g, np.abs(Eg - gv).max())
        worst_d = max(worst_d, np.abs(ED - (gl - M1 - M2)).max())
    verdict(worst_g <= 1e-10 and worst_d <= 1e-10,
            f"max primal deviation {worst_g:.2e}, max dual deviation {worst_d:.2e} over 20 instances (<= 1e-10)")


def test_iterate_invariants(verdict):
    grid = build_mdp(small_grid())
    rng = np.random.default_rng(4)
    small = random_mdp(rng, 3, 2, GAMMA)
    cases = [
        (grid, no_risk(25, 4, GAMMA)),
        (grid, kl_prior(grid_prior(grid), GAMMA, 1.0)),
        (grid, variance_risk(grid, 2.0)),
        (small, kl_prior(random_occupancy(rng, 3, 2, GAMMA) * (1 - GAMMA), GAMMA, 10.0)),
        (small, quadratic_prior(random_occupancy(rng, 3, 2, GAMMA) * (1 - GAMMA), GAMMA, 5.0)),
        (small, peak_exposure([[0], [1, 2]], 3, 2, GAMMA, 3.0)),
    ]
    worst = {"mass": 0.0, "min_lambda": np.inf, "zeta_margin": np.inf, "delta": -np.inf, "v_excess": -np.inf}
    for mdp, risk in cases:
        for s in range(3):
            d = solve(GenerativeModel(mdp, 50 + s), risk, SolverConfig(T=20_000, seed=s)).diagnostics
            worst["mass"] = max(worst["mass"], d["max_mass_error"])
            worst["min_lambda"] = min(worst["min_lambda"], d["min_lambda"])
            worst["zeta_margin"] = min(worst["zeta_margin"], d["min_zeta_margin"])
            worst["delta"] = max(worst["delta"], d["max_delta"])
            bound = 2 * (1 + risk.c * risk.sigma) / (1 - GAMMA)
            worst["v_excess"] = max(worst["v_excess"], d["max_v_inf"] - bound)
    ok = (worst["mass"] <= 1e-9 and worst["min_lambda"] >= 0 and worst["zeta_margin"] >= -1e-15
          and worst["delta"] <= 1e-12 and worst["v_excess"] <= 0)
    verdict(ok, "mass error {mass:.1e}, min lambda {min_lambda:.1e}, zeta margin {zeta_margin:.1e}, "
                "max Delta {delta:.1e}, v excess over radius {v_excess:.2f}".format(**worst))


def test_risk_gradients_match_finite_differences(verdict):
    rng = np.random.default_rng(5)
    S, A, h = 3, 2, 1e-6
    worst = {}
    for i in range(100):
        mdp = random_mdp(rng, S, A, GAMMA)
        lam = random_occupancy(rng, S, A, GAMMA, low=0.1)
        specs = {
            "kl_prior": kl_prior(random_occupancy(rng, S, A, GAMMA, low=0.1) * (1 - GAMMA), GAMMA, 1.0),
            "variance": variance_risk(mdp, 1.0),
            "log_barrier_safety": safety_barrier([0, 1], S, A, GAMMA, 0.9, 1.0),
            "multi_job_barrier": multi_job_barrier(rng.random((2, S, A)), [0.01, 0.01], GAMMA, 1.0),
            "bca_surrogate": lambda_subproblem_risk(rng.dirichlet(np.ones(S * A)), mdp, 2.0, 3.0),
        }
        for name, spec in specs.items():
            fd = np.zeros_like(lam)
            for idx in np.ndindex(lam.shape):
                up, dn = lam.copy(), lam.copy()
                up[idx] += h
                dn[idx] -= h
                fd[idx] = (risk_value(spec, up) - risk_value(spec, dn)) / (2 * h)
            err = np.abs(risk_subgradient(spec, lam) - fd).max() / np.abs(fd).max()
            worst[name] = max(worst.get(name, 0.0), err)
    ok = max(worst.values()) <= 1e-5
    verdict(ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + " (relative, <= 1e-5)")


def test_simplex_projection_oracle(verdict):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        x = rng.normal(size=10) * rng.choice([0.1, 1.0, 10.0])
        worst = max(worst, np.abs(project_simplex(x) - brute_force_projection(x)).max())
    verdict(worst <= 1e-8, f"max deviation from active-set enumeration {worst:.2e} over 1000 inputs (<= 1e-8)")


@pytest.mark.slow
def test_kl_prior_trend(verdict):
    rng = np.random.default_rng(2024)
    mdp = random_mdp(rng, 3, 2, GAMMA)
    prior = random_occupancy(rng, 3, 2, GAMMA) * (1 - GAMMA)
    budgets = [10_000 * 2**k for k in range(5)]
    curves = {}
    for c in (1.0, 10.0):
        risk = kl_prior(prior, GAMMA, c)
        target = (1 - GAMMA) * exact_cautious_solve(mdp, risk).lambda_star
        rows = []
        for T in budgets:
            kl = [kl_divergence((1 - GAMMA) * solve(GenerativeModel(mdp, 500 + s), risk,
                                                    SolverConfig(T=T, seed=s)).lambda_bar, target) for s in SEEDS]
            rows.append((np.mean(kl), np.std(kl, ddof=1) / np.sqrt(len(kl))))
        curves[c] = rows
    mean, se = np.array(curves[1.0]).T
    # each doubling may rise by at most two standard errors of the difference, and the trend must go down
    steps_ok = all(mean[k + 1] <= mean[k] + 2 * np.hypot(se[k], se[k + 1]) for k in range(len(budgets) - 1))
    trend_ok = mean[-1] < mean[0]
    final_ok = curves[10.0][-1][0] < curves[1.0][-1][0]
    ok = steps_ok and trend_ok and final_ok
    verdict(ok, "c=1 mean KL " + " ".join(f"{m:.3g}" for m in mean)
            + f"; steps within noise {steps_ok}, overall decrease {trend_ok}"
            + f"; final c=10 {curves[10.0][-1][0]:.3g} < c=1 {curves[1.0][-1][0]:.3g}: {final_ok}")


def run_config(name, command, tmp_path):
    path = CONFIGS / name
    cfg = resolve_config(load_config(path), command)
    t0 = time.perf_counter()
    summary = run_command(command, cfg, tmp_path / command, base_dir=path.parent)
    return summary, time.perf_counter() - t0


@pytest.mark.slow
def test_bca_variance_experiment(tmp_path, verdict):
    summary, wall = run_config("maze_bca.json", "bca", tmp_path)
    s = summary["seeds"]["0"]
    var_n, var_b = s["neutral"]["rollout_variance"], s["bca"]["rollout_variance"]
    ratio = s["mean_ratio"]
    ok = s["variance_reduced"] and ratio >= 0.8 and s["phi_monotone"] is True and wall <= 600
    verdict(ok, f"variance bca {var_b:.3f} vs neutral {var_n:.3f}, mean ratio {ratio:.3f} (>= 0.8), "
                f"phi monotone {s['phi_monotone']}, {wall:.0f} s")


@pytest.mark.slow
def test_kl_transfer_experiment(tmp_path, verdict):
    summary, wall = run_config("kl_transfer.json", "kl-transfer", tmp_path)
    seeds = summary["seeds"]
    assert len(seeds) == 10
    pairs = [(s["kl_prior"]["unrewarding_policy"], s["neutral"]["unrewarding_policy"]) for s in seeds.values()]
    ok = all(a < b for a, b in pairs)
    wins = sum(a < b for a, b in pairs)
    verdict(ok, f"kl_prior below neutral on {wins}/10 seeds; mean {np.mean([a for a, _ in pairs]):.4f} "
                f"vs {np.mean([b for _, b in pairs]):.4f}")


def test_baseline_self_consistency(verdict):
    rng = np.random.default_rng(10)
    tol = 1e-9
    gaps, kkts, bounds = [], [], []
    for _ in range(10):
        mdp = random_mdp(rng, 4, 2, GAMMA)
        xi = rng.dirichlet(np.ones(4))
        rep = exact_cautious_solve(mdp, xi=xi, tol=tol)
        gaps.append(abs(rep.objective - float(xi @ value_iteration(mdp, tol=1e-12).v)))
        kkts.append(kkt_residual(mdp, rep.lambda_star, rep.v_star, None, 0.0, xi))
        bounds.append(lemma1_bound_check(mdp, None, 0.0, xi, report=rep))
        prior = (1 - GAMMA) * occupancy_from_policy(mdp, random_policy(rng, 4, 2))
        for risk in (kl_prior(prior, GAMMA, float(rng.uniform(0.1, 10))),
                     quadratic_prior(prior, GAMMA, 5.0), peak_exposure([[0, 1]], 4, 2, GAMMA, 2.0)):
            rep = exact_cautious_solve(mdp, risk, xi=xi, tol=tol)
            bounds.append(lemma1_bound_check(mdp, risk, xi=xi, report=rep))
            if risk.kind != "peak":
                kkts.append(kkt_residual(mdp, rep.lambda_star, rep.v_star, risk, xi=xi))
    ok = max(gaps) <= 1e-6 and max(kkts) <= 10 * tol and all(bounds)
    verdict(ok, f"duality gap {max(gaps):.1e} (<= 1e-6), KKT residual {max(kkts):.1e} (<= {10 * tol:.0e}), "
                f"value bound on {sum(bounds)}/{len(bounds)} solutions")
