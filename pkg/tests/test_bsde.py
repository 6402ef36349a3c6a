import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvdual.bsde import (
    RegressionConfig,
    RegressionPlan,
    conditional_expectation,
    lemma32_convergence_probe,
    make_state,
    recover_portfolio,
    solve_bsde,
    solve_variational,
)
from mvdual.drivers import LinearParams, large_investor_driver, linear_driver, tax_driver, zero_driver
from mvdual.dual import mc_stderr
from mvdual.errors import IllConditionedBasisError, InvalidArgumentError, InvalidModelError, UnsupportedForNonsmoothError
from mvdual.fbsde import initial_adjoint
from mvdual.paths import make_grid, simulate_paths


def _state(dr, paths):
    return make_state(initial_adjoint(dr, paths).q)


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        RegressionConfig(basis_degree=-1)
    with pytest.raises(InvalidArgumentError):
        RegressionConfig(ridge=-1.0)
    with pytest.raises(InvalidArgumentError):
        RegressionConfig(state_features="nope")


def test_zero_driver_constant_terminal(small_paths):
    dr = zero_driver()
    sol = solve_bsde(dr, np.ones(small_paths.n_paths), small_paths, _state(dr, small_paths))
    np.testing.assert_allclose(sol.X, 1.0, atol=1e-12)
    np.testing.assert_allclose(sol.Z, 0.0, atol=1e-10)
    assert sol.X0 == pytest.approx(1.0, abs=1e-12)


def test_deterministic_discounting():
    paths = simulate_paths(make_grid(1.0, 100), 1, 2000, 0, True)
    dr = linear_driver(LinearParams(0.05, 0.0))
    sol = solve_bsde(dr, np.ones(paths.n_paths), paths, _state(dr, paths))
    assert abs(sol.X0 - math.exp(-0.05)) < 1e-3


def test_terminal_exact_and_x0_deterministic(small_paths, golden_params):
    dr = linear_driver(golden_params)
    xi = np.maximum(1.0 + small_paths.terminal()[:, 0], 0.0)
    sol = solve_bsde(dr, xi, small_paths, _state(dr, small_paths))
    np.testing.assert_array_equal(sol.X[:, -1], xi)
    assert np.all(sol.X[:, 0] == sol.X0)
    assert sol.X.shape == (small_paths.n_paths, 51) and sol.Z.shape == (small_paths.n_paths, 50, 1)
    assert set(sol.diagnostics) >= {"condition", "residual_rms"}


def test_price_of_adjoint_square():
    paths = simulate_paths(make_grid(1.0, 100), 1, 100_000, 3, True)
    dr = linear_driver(LinearParams(0.0, 0.2))
    adj = initial_adjoint(dr, paths)
    sol = solve_bsde(dr, adj.qT, paths, make_state(adj.q))
    se = mc_stderr(adj.qT**2, True)
    assert abs(sol.X0 - math.exp(0.04)) <= 3 * se


def test_linear_pricing(small_paths, golden_params):
    dr = linear_driver(golden_params)
    adj = initial_adjoint(dr, small_paths)
    xi = np.maximum(1.2 - 0.5 * adj.qT, 0.0) + 0.1 * np.cos(small_paths.terminal()[:, 0])
    sol = solve_bsde(dr, xi, small_paths, make_state(adj.q))
    assert abs(sol.X0 - np.mean(xi * adj.qT)) <= 3 * mc_stderr(xi * adj.qT, True)


def test_zero_driver_martingale_means(small_paths):
    dr = zero_driver()
    xi = np.exp(small_paths.terminal()[:, 0])
    sol = solve_bsde(dr, xi, small_paths, make_state(initial_adjoint(linear_driver(LinearParams(0, 0.3)), small_paths).q))
    means = sol.X.mean(axis=0)
    assert np.all(np.abs(means - means[-1]) <= 3 * mc_stderr(xi, False))


def test_comparison_monotonicity(small_paths, golden_params):
    dr = tax_driver(golden_params, 0.2)
    state = _state(dr, small_paths)
    qT = initial_adjoint(dr, small_paths).qT
    xi1 = np.maximum(3.0 - 2.0 * qT, 0.0)
    xi2 = xi1 + 0.05 * (1 + np.sin(small_paths.terminal()[:, 0]))
    s1 = solve_bsde(dr, xi1, small_paths, state)
    s2 = solve_bsde(dr, xi2, small_paths, state, plan=s1.plan)
    assert s1.X0 <= s2.X0 + 3 * math.sqrt(2) * mc_stderr(xi2, True)


def test_driver_monotonicity(small_paths, golden_params):
    lin, tax = linear_driver(golden_params), tax_driver(golden_params, 0.1)
    state = _state(lin, small_paths)
    qT = initial_adjoint(lin, small_paths).qT
    xi = np.maximum(4.0 - 2.5 * qT, 0.0)
    a = solve_bsde(lin, xi, small_paths, state)
    b = solve_bsde(tax, xi, small_paths, state, plan=a.plan)
    assert a.X0 <= b.X0 + 3 * math.sqrt(2) * mc_stderr(xi * qT, True)


def test_plan_reuse_is_exact(small_paths, golden_params):
    dr = linear_driver(golden_params)
    state = _state(dr, small_paths)
    xi = np.maximum(1.0 + small_paths.terminal()[:, 0], 0.0)
    a = solve_bsde(dr, xi, small_paths, state)
    plan = RegressionPlan(state, RegressionConfig(), small_paths)
    b = solve_bsde(dr, xi, small_paths, state, plan=plan)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.Z, b.Z)


@pytest.mark.parametrize("features", ["adjoint_state", "wealth_proxy", "both"])
def test_state_feature_variants(small_paths, golden_params, features):
    dr = linear_driver(golden_params)
    adj = initial_adjoint(dr, small_paths)
    xi = np.maximum(4.5 - 2.4 * adj.qT, 0.0) / 2
    base = solve_bsde(dr, xi, small_paths, make_state(adj.q))
    state = make_state(adj.q, base.X, features)
    assert state.shape == (small_paths.n_paths, 51, 2 if features == "both" else 1)
    sol = solve_bsde(dr, xi, small_paths, state)
    assert abs(sol.X0 - base.X0) < 5e-3


def test_bad_shapes(small_paths, golden_params):
    dr = linear_driver(golden_params)
    state = _state(dr, small_paths)
    with pytest.raises(InvalidArgumentError):
        solve_bsde(dr, np.ones(3), small_paths, state)
    with pytest.raises(InvalidArgumentError):
        solve_bsde(dr, np.ones(small_paths.n_paths), small_paths, state[:, :10])
    with pytest.raises(InvalidArgumentError):
        solve_bsde(linear_driver(LinearParams(0.0, [0.1, 0.2])), np.ones(small_paths.n_paths), small_paths, state)


def test_ill_conditioned_basis_is_reported():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 1))
    feats = np.hstack([x, x * (1 + 1e-15)])  # collinear columns
    cfg = RegressionConfig(basis_degree=3, ridge=0.0, n_bins=1)
    with pytest.raises(IllConditionedBasisError):
        conditional_expectation(feats, x**2, cfg, step=4)


def test_conditional_expectation_recovers_polynomial():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, size=(4000, 1))
    y = 1 + 2 * x - x**3
    fitted, cond, resid = conditional_expectation(x, y, RegressionConfig(basis_degree=3, n_bins=1))
    np.testing.assert_allclose(fitted, y, atol=1e-6)
    assert resid < 1e-6 and cond < 1e12


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), bins=st.integers(1, 16), deg=st.integers(0, 4))
def test_cell_means_preserved(seed, bins, deg):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3000, 1))
    y = np.exp(x) + rng.normal(size=(3000, 1))
    fitted, _, _ = conditional_expectation(x, y, RegressionConfig(basis_degree=deg, n_bins=bins, clip_to_range=False))
    assert fitted.mean() == pytest.approx(y.mean(), abs=1e-9)


def test_variational_linear_equals_bsde(small_paths, golden_params):
    dr = linear_driver(golden_params)
    state = _state(dr, small_paths)
    qT = initial_adjoint(dr, small_paths).qT
    xi = np.maximum(4.5 - 2.4 * qT, 0.0) / 2
    xh = np.tanh(small_paths.terminal()[:, 0])
    base = solve_bsde(dr, xi, small_paths, state, RegressionConfig(clip_to_range=False))
    var = solve_variational(dr, base, xh, small_paths, RegressionConfig(clip_to_range=False))
    direct = solve_bsde(dr, xh, small_paths, state, RegressionConfig(clip_to_range=False), plan=base.plan)
    np.testing.assert_allclose(var.X, direct.X, atol=1e-10)
    np.testing.assert_allclose(var.Z, direct.Z, atol=1e-10)


def test_variational_zero_perturbation(small_paths, golden_params):
    dr = large_investor_driver(golden_params)
    state = _state(dr, small_paths)
    base = solve_bsde(dr, np.ones(small_paths.n_paths), small_paths, state)
    var = solve_variational(dr, base, np.zeros(small_paths.n_paths), small_paths)
    assert np.all(var.X == 0.0) and np.all(var.Z == 0.0)


def test_variational_rejects_nonsmooth(small_paths, golden_params):
    dr = tax_driver(golden_params, 0.1)
    base = solve_bsde(dr, np.ones(small_paths.n_paths), small_paths, _state(dr, small_paths))
    with pytest.raises(UnsupportedForNonsmoothError):
        solve_variational(dr, base, np.ones(small_paths.n_paths), small_paths)
    with pytest.raises(UnsupportedForNonsmoothError):
        lemma32_convergence_probe(dr, np.ones(small_paths.n_paths), np.ones(small_paths.n_paths), small_paths, [0.5])


def test_variational_tracks_clipping(small_paths, golden_params):
    # with clipping on, the variational pass is the one-sided derivative of the clipped scheme
    dr = linear_driver(golden_params)
    state = _state(dr, small_paths)
    qT = initial_adjoint(dr, small_paths).qT
    xi = np.maximum(4.5 - 2.4 * qT, 0.0) / 2
    xh = np.cos(small_paths.terminal()[:, 0])
    base = solve_bsde(dr, xi, small_paths, state)
    var = solve_variational(dr, base, xh, small_paths)
    h = 1e-7
    pert = solve_bsde(dr, xi + h * xh, small_paths, state, plan=base.plan)
    assert abs((pert.X0 - base.X0) / h - var.X0) < 1e-5


def test_probe_linear_and_zero(small_paths, golden_params):
    dr = linear_driver(golden_params)
    qT = initial_adjoint(dr, small_paths).qT
    xi = np.maximum(4.5 - 2.4 * qT, 0.0) / 2
    rows = lemma32_convergence_probe(dr, xi, np.sin(small_paths.terminal()[:, 0]), small_paths, [0.5, 0.25])
    assert all(r.x_error < 1e-18 and r.z_error < 1e-18 for r in rows)
    li = large_investor_driver(golden_params)
    rows = lemma32_convergence_probe(li, xi, np.zeros(small_paths.n_paths), small_paths, [0.5, 0.1])
    assert all(r.x_error <= 1e-10 and r.z_error <= 1e-10 for r in rows)
    with pytest.raises(InvalidArgumentError):
        lemma32_convergence_probe(li, xi, xi, small_paths, [0.25, 0.5])


def test_recover_portfolio():
    sol_Z = np.arange(12, dtype=float).reshape(2, 3, 2)

    class S:
        Z = sol_Z
        times = np.array([0.0, 0.5, 1.0, 1.5])

    sig = np.array([[2.0, 0.5], [0.0, 1.0]])
    pi = recover_portfolio(S, lambda t: sig)
    np.testing.assert_allclose(pi @ sig, sol_Z, atol=1e-12)  # row form of sigma' pi
    pi1 = recover_portfolio(type("T", (), {"Z": np.full((1, 1, 1), 3.0), "times": np.array([0.0, 1.0])}), lambda t: np.array([[2.0]]))
    assert pi1[0, 0, 0] == 1.5
    with pytest.raises(InvalidModelError):
        recover_portfolio(S, lambda t: np.zeros((2, 2)))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000))
def test_recover_portfolio_round_trip(seed):
    rng = np.random.default_rng(seed)
    while True:
        sig = rng.normal(size=(3, 3))
        if np.linalg.cond(sig) < 1e3:
            break
    Z = rng.normal(size=(4, 2, 3))
    S = type("S", (), {"Z": Z, "times": np.array([0.0, 0.5, 1.0])})
    pi = recover_portfolio(S, lambda t: sig)
    np.testing.assert_allclose(np.einsum("ji,nkj->nki", sig, pi), Z, atol=1e-12)
