import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cautious_rl.generative import GenerativeModel
from cautious_rl.mdp import TabularMDP
from cautious_rl.oracle import value_iteration
from cautious_rl.risk import kl_prior, no_risk, variance_risk
from cautious_rl.saddle import (
    ConfigError,
    SolverConfig,
    SolverError,
    TransitionSample,
    default_parameters,
    dual_increment,
    dual_step,
    exploration_mixture,
    primal_gradient_estimate,
    primal_step,
    resolve_parameters,
    solve,
)

from conftest import enumerate_expectations, lagrangian_gradients, random_mdp, random_occupancy

GAMMA = 0.9


# -- single-step operations ------------------------------------------------------


def test_mixture_of_uniform_is_uniform():
    lam = np.full((3, 2), 1 / (0.1 * 6))
    for d in (0.05, 0.3, 0.45):
        assert np.allclose(exploration_mixture(lam, d, 0.9), 1 / 6, atol=1e-15)


def test_mixture_hand_example():
    lam = np.array([[1.0, 0.0], [0.0, 0.0]]) / 0.1
    zeta = exploration_mixture(lam, 0.4, 0.9)
    assert np.allclose(zeta, [[0.7, 0.1], [0.1, 0.1]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), delta=st.floats(1e-3, 0.499))
def test_mixture_mass_and_floor(seed, delta):
    rng = np.random.default_rng(seed)
    lam = random_occupancy(rng, 4, 3, GAMMA, low=0.0)
    zeta = exploration_mixture(lam, delta, GAMMA)
    assert abs(zeta.sum() - 1.0) <= 1e-12
    assert zeta.min() >= delta / 12 - 1e-15


def test_primal_estimate_unit_ratio():
    lam = np.full((2, 1), 0.5)
    g = primal_gradient_estimate(TransitionSample(0, 0, 1, 0.0, 0), lam, lam.copy(), 0.9)
    assert np.allclose(g, [0.0, 0.9], atol=1e-15)


def test_primal_estimate_zero_ratio():
    lam = np.array([[0.0, 5.0], [5.0, 0.0]])
    zeta = np.full((2, 2), 0.25)
    g = primal_gradient_estimate(TransitionSample(0, 0, 1, 0.0, 1), lam, zeta, 0.9)
    assert np.array_equal(g, [0.0, 1.0])


def test_dual_increment_hand_value():
    risk = no_risk(2, 2, 0.9)
    zeta = np.full((2, 2), 0.25)
    D = dual_increment(TransitionSample(0, 1, 1, 1.0, 0), np.zeros(2), np.full((2, 2), 2.5), zeta, risk, 40.0, 0.0)
    expected = np.zeros((2, 2))
    expected[0, 1] = -156.0
    assert np.allclose(D, expected, atol=1e-12)


def test_dual_increment_zero_probability_rejected():
    risk = no_risk(2, 2, 0.9)
    with pytest.raises(SolverError):
        dual_increment(TransitionSample(0, 0, 1, 1.0, 0), np.zeros(2), np.full((2, 2), 2.5), np.zeros((2, 2)),
                       risk, 40.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_dual_increment_nonpositive_under_schedule(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 3, 2, GAMMA)
    prior = random_occupancy(rng, 3, 2, GAMMA) * (1 - GAMMA)
    risk = kl_prior(prior, GAMMA, float(rng.uniform(0, 3)))
    _, _, M1, M2 = default_parameters(3, 2, GAMMA, risk.c, risk.sigma, 100)
    C = (1 + risk.c * risk.sigma) / (1 - GAMMA)
    v = rng.uniform(-2 * C, 2 * C, size=3)
    lam = random_occupancy(rng, 3, 2, GAMMA, low=0.0)
    zeta = exploration_mixture(lam, 0.1, GAMMA)
    for s in range(3):
        for a in range(2):
            for j in range(3):
                smp = TransitionSample(s, a, j, mdp.transition_reward[s, j, a], 0)
                assert dual_increment(smp, v, lam, zeta, risk, M1, M2).max() <= 1e-12


def test_primal_step_examples():
    v = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(primal_step(v, np.zeros(3), 0.3, 10.0), v)
    C = 10.0
    out = primal_step(np.zeros(3), np.array([3 * C, -3 * C, 0.0]), 1.0, C)
    assert np.array_equal(out, [-2 * C, 2 * C, 0.0])


@settings(max_examples=100, deadline=None)
@given(v=st.lists(st.floats(-100, 100), min_size=4, max_size=4),
       g=st.lists(st.floats(-100, 100), min_size=4, max_size=4),
       alpha=st.floats(1e-3, 5.0), C=st.floats(0.1, 50.0))
def test_primal_step_is_box_projection(v, g, alpha, C):
    x = np.array(v) - alpha * np.array(g)
    out = primal_step(v, g, alpha, C)
    # coordinatewise case analysis: below, inside or above the interval
    for xi, oi in zip(x, out):
        expected = -2 * C if xi < -2 * C else (2 * C if xi > 2 * C else xi)
        assert abs(oi - expected) <= 1e-12


def test_dual_step_hand_example():
    out = dual_step(np.array([1.0, 1.0]), np.array([0.0, -math.log(4.0)]), 1.0, 0.5)
    assert np.allclose(out, [1.6, 0.4], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), kappa=st.floats(-1e3, 1e3))
def test_dual_step_fixed_points_and_mass(seed, kappa):
    rng = np.random.default_rng(seed)
    lam = random_occupancy(rng, 3, 2, GAMMA)
    assert np.allclose(dual_step(lam, np.zeros_like(lam), 0.7, GAMMA), lam, rtol=1e-12)
    assert np.allclose(dual_step(lam, np.full_like(lam, kappa), 0.7, GAMMA), lam, rtol=1e-10)
    out = dual_step(lam, rng.normal(size=lam.shape) * 50, 0.7, GAMMA)
    assert abs(out.sum() - 1 / (1 - GAMMA)) <= 1e-9 and (out >= 0).all()


def test_dual_step_rejects_zero_iterate():
    with pytest.raises(SolverError):
        dual_step(np.zeros((2, 2)), np.zeros((2, 2)), 1.0, GAMMA)


def test_schedule_examples():
    alpha, beta, M1, M2 = default_parameters(4, 2, 0.9, 0.0, 3.0, 800)
    assert (M1, M2) == pytest.approx((40.0, 0.0))
    assert alpha == pytest.approx(0.070711, abs=5e-7)
    assert beta == pytest.approx(1.8025e-3, abs=5e-8)


def test_schedule_scales_with_risk():
    alpha, beta, M1, M2 = default_parameters(4, 2, 0.9, 2.0, 0.5, 800)
    assert M1 == pytest.approx(80.0) and M2 == pytest.approx(1.0)
    assert alpha == pytest.approx(2 * math.sqrt(4 / 800))
    assert beta == pytest.approx(0.1 / 2 * math.sqrt(math.log(8) / 6400))


def test_overrides_and_scales(rng):
    mdp = random_mdp(rng, 4, 2, GAMMA)
    risk = no_risk(4, 2, GAMMA)
    prm = resolve_parameters(mdp, risk, SolverConfig(T=800, M1=0.0, alpha_scale=0.1, beta_scale=10.0))
    assert prm["M1"] == 0.0 and prm["M2"] == 0.0
    assert prm["alpha"] == pytest.approx(0.0070711, abs=5e-8)
    assert prm["beta"] == pytest.approx(1.8025e-2, abs=5e-7)


@pytest.mark.parametrize("bad", [dict(delta=0.5), dict(delta=0.0), dict(T=0), dict(alpha=-1.0),
                                 dict(auto_params=False), dict(backend="cuda"), dict(alpha_scale=0.0)])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        SolverConfig(**bad).validate()


# -- estimator unbiasedness --------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(0.0, 4.0), kind=st.sampled_from(["none", "kl", "variance"]))
def test_estimators_unbiased_by_enumeration(seed, c, kind):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 2, 2, GAMMA)
    risk = {"none": no_risk(2, 2, GAMMA).with_c(c),
            "kl": kl_prior(random_occupancy(rng, 2, 2, GAMMA) * (1 - GAMMA), GAMMA, c),
            "variance": variance_risk(mdp, c)}[kind]
    lam = random_occupancy(rng, 2, 2, GAMMA)
    v = rng.normal(size=2) * 5
    xi = rng.dirichlet([1.0, 1.0])
    M1, M2 = 17.0, 0.3
    Eg, ED = enumerate_expectations(mdp, risk, lam, v, xi, 0.2, M1, M2)
    gv, gl = lagrangian_gradients(mdp, risk, lam, v, xi)
    assert np.max(np.abs(Eg - gv)) <= 1e-10
    assert np.max(np.abs(ED - (gl - M1 - M2))) <= 1e-10


# -- full runs ------------------------------------------------------------------


def two_state_mdp():
    P = np.array([[[0.9, 0.1], [0.2, 0.8]], [[0.3, 0.7], [0.6, 0.4]]])
    R = np.array([[0.1, 0.8], [0.5, 0.2]])
    return TabularMDP.from_expected_rewards(P, R, GAMMA)


def test_single_step_returns_initial_point():
    mdp = two_state_mdp()
    res = solve(GenerativeModel(mdp, 0), no_risk(2, 2, GAMMA), SolverConfig(T=1))
    assert np.allclose(res.lambda_bar, 1 / (0.1 * 4), atol=1e-15)
    assert np.array_equal(res.v_bar, np.zeros(2))


def test_runs_are_bit_deterministic():
    mdp = two_state_mdp()
    cfg = SolverConfig(T=5000, record_every=1000, seed=3)
    a = solve(GenerativeModel(mdp, 9), no_risk(2, 2, GAMMA), cfg)
    b = solve(GenerativeModel(mdp, 9), no_risk(2, 2, GAMMA), cfg)
    assert np.array_equal(a.lambda_bar, b.lambda_bar) and np.array_equal(a.v_bar, b.v_bar)
    assert [m.as_row()[:-1] for m in a.metrics] == [m.as_row()[:-1] for m in b.metrics]


def test_average_matches_stored_iterates(rng):
    mdp = random_mdp(rng, 3, 2, GAMMA)
    risk = kl_prior(random_occupancy(rng, 3, 2, GAMMA) * (1 - GAMMA), GAMMA, 1.0)
    res = solve(GenerativeModel(mdp, 1), risk, SolverConfig(T=300, store_iterates=True, seed=2))
    assert np.max(np.abs(res.iterates["lambda"].mean(axis=0) - res.lambda_bar)) <= 1e-12
    assert np.max(np.abs(res.iterates["v"].mean(axis=0) - res.v_bar)) <= 1e-12


def test_backends_agree_on_short_runs(rng):
    mdp = random_mdp(rng, 3, 2, GAMMA)
    risk = variance_risk(mdp, 2.0)
    # both backends draw identical samples; only float round-off differs, and it grows with T
    cfg = SolverConfig(T=50, seed=4)
    a = solve(GenerativeModel(mdp, 5), risk, cfg)
    b = solve(GenerativeModel(mdp, 5), risk, replace(cfg, backend="python"))
    assert np.max(np.abs(a.lambda_bar - b.lambda_bar)) <= 1e-10
    assert np.max(np.abs(a.v_bar - b.v_bar)) <= 1e-10


def test_iterate_diagnostics_within_bounds(rng):
    mdp = random_mdp(rng, 3, 2, GAMMA)
    risk = kl_prior(random_occupancy(rng, 3, 2, GAMMA) * (1 - GAMMA), GAMMA, 1.0)
    res = solve(GenerativeModel(mdp, 1), risk, SolverConfig(T=20000, seed=2))
    d = res.diagnostics
    assert d["max_mass_error"] <= 1e-9 and d["min_lambda"] >= 0.0
    assert d["min_zeta_margin"] >= -1e-15 and d["max_delta"] <= 1e-12
    assert d["max_v_inf"] <= 2 * (1 + risk.c * risk.sigma) / (1 - GAMMA) + 1e-12


def test_callback_sees_running_average():
    mdp = two_state_mdp()
    seen = []
    res = solve(GenerativeModel(mdp, 0), no_risk(2, 2, GAMMA), SolverConfig(T=3000, record_every=1000),
                callback=lambda t, lam: seen.append((t, lam)))
    assert [t for t, _ in seen] == [1000, 2000, 3000]
    assert np.array_equal(seen[-1][1], res.lambda_bar)


def test_warm_start_is_normalized():
    mdp = two_state_mdp()
    res = solve(GenerativeModel(mdp, 0), no_risk(2, 2, GAMMA),
                SolverConfig(T=1, lambda_init=np.array([[1.0, 0.0], [0.0, 3.0]])))
    assert np.allclose(res.lambda_bar, [[2.5, 0.0], [0.0, 7.5]], atol=1e-14)


def test_risk_shape_mismatch_rejected():
    with pytest.raises(ConfigError):
        solve(GenerativeModel(two_state_mdp(), 0), no_risk(3, 2, GAMMA), SolverConfig(T=10))


@pytest.mark.slow
def test_two_state_neutral_return_close_to_optimum():
    mdp = two_state_mdp()
    target = float(np.full(2, 0.5) @ value_iteration(mdp).v)
    rets = []
    for seed in range(10):
        res = solve(GenerativeModel(mdp, 100 + seed), no_risk(2, 2, GAMMA), SolverConfig(T=200_000, seed=seed))
        rets.append(float(np.sum(res.lambda_bar * mdp.reward)))
    assert abs(np.mean(rets) - target) <= 0.05 * abs(target)
