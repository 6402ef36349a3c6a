import math

import numpy as np
import pytest

from mvdual.bsde import BsdeSolution, make_state, solve_bsde
from mvdual.drivers import LinearParams, borrow_driver, large_investor_driver, linear_driver, tax_driver, zero_driver
from mvdual.dual import mc_stderr
from mvdual.errors import InvalidArgumentError, NumericalBlowupError
from mvdual.fbsde import CoupledWorkspace, PicardConfig, initial_adjoint, simulate_adjoint, solve_coupled
from mvdual.multipliers import Multipliers, lambda2_for_mean, terminal_wealth
from mvdual.paths import make_grid, simulate_paths

LAM = Multipliers(2.4571796083847284, -4.456906711338602)


def test_picard_config_validation():
    for bad in (dict(tol=0.0), dict(damping=0.0), dict(damping=1.5), dict(max_iters=0)):
        with pytest.raises(InvalidArgumentError):
            PicardConfig(**bad)


def test_zero_driver_adjoint_is_one(small_paths):
    adj = initial_adjoint(zero_driver(), small_paths)
    assert np.all(adj.q == 1.0)


def test_deterministic_discount_adjoint(small_paths):
    adj = initial_adjoint(linear_driver(LinearParams(0.05, 0.0)), small_paths)
    np.testing.assert_allclose(adj.qT, math.exp(-0.05), rtol=1e-13)
    assert np.all(adj.q[:, 0] == 1.0)


def test_linear_adjoint_moments():
    paths = simulate_paths(make_grid(1.0, 50), 1, 100_000, 11, False)
    qT = initial_adjoint(linear_driver(LinearParams(0.0, 0.2)), paths).qT
    assert abs(qT.mean() - 1.0) <= 3 * mc_stderr(qT)
    var = qT.var(ddof=1)
    # standard error of the sample variance from the fourth central moment
    m4 = np.mean((qT - qT.mean()) ** 4)
    se_var = math.sqrt((m4 - var**2) / qT.size)
    assert abs(var - (math.exp(0.04) - 1)) <= 3 * se_var
    assert qT.min() > 0


def test_adjoint_along_solution_matches_gradients(small_paths, golden_params):
    dr = tax_driver(golden_params, 0.1)
    adj0 = initial_adjoint(dr, small_paths)
    sol = solve_bsde(dr, terminal_wealth(LAM, adj0.qT), small_paths, make_state(adj0.q))
    adj = simulate_adjoint(dr, sol, small_paths)
    fx, fz = dr.grad_fn(sol.X[:, 0], sol.Z[:, 0, :], 0.0)
    step = (fx - 0.5 * fz[:, 0] ** 2) * small_paths.grid.dt + fz[:, 0] * small_paths.increments[:, 0, 0]
    np.testing.assert_allclose(adj.log_q[:, 1], step, atol=1e-15)


def test_adjoint_blowup_detected(small_paths):
    sol = solve_bsde(
        zero_driver(), np.ones(small_paths.n_paths), small_paths, make_state(np.ones((small_paths.n_paths, 51)))
    )
    bad = BsdeSolution(np.full_like(sol.X, np.nan), sol.Z, sol.X0, sol.times, sol.state)
    with pytest.raises(NumericalBlowupError):
        simulate_adjoint(large_investor_driver(LinearParams(0.0, 0.2)), bad, small_paths)


def test_linear_decoupled(small_paths, golden_params):
    cs = solve_coupled(linear_driver(golden_params), LAM, small_paths)
    assert cs.converged and cs.iterations <= 2
    assert cs.history[0] < 1e-12


def test_linear_picard_exact_without_noise(small_paths):
    cs = solve_coupled(linear_driver(LinearParams(0.02, 0.0)), Multipliers(1.0, -3.0), small_paths, pcfg=PicardConfig(max_iters=3, tol=1e-300))
    assert max(cs.history) < 1e-8


def test_positive_lambda2_gives_zero_solution(small_paths, golden_params):
    cs = solve_coupled(linear_driver(golden_params), Multipliers(1.0, 0.5), small_paths)
    assert np.all(cs.xi == 0.0)
    assert np.all(cs.solution.X == 0.0) and np.all(cs.solution.Z == 0.0)


def test_tax_converges(small_paths, golden_params):
    cs = solve_coupled(tax_driver(golden_params, 0.1), LAM, small_paths)
    assert cs.converged and cs.iterations <= 50
    assert cs.history[-1] < 1e-4
    assert cs.adjoint.q.min() > 0


def test_large_investor_converges(small_paths, golden_params):
    cs = solve_coupled(large_investor_driver(golden_params), LAM, small_paths)
    assert cs.converged


def test_non_convergence_is_reported(small_paths, golden_params):
    cs = solve_coupled(borrow_driver(golden_params, 0.05), LAM, small_paths, pcfg=PicardConfig(max_iters=4))
    assert not cs.converged and cs.iterations == 4 and len(cs.history) == 4


def test_target_mean_fixes_lambda2(small_paths, golden_params):
    dr = tax_driver(golden_params, 0.1)
    cs = solve_coupled(dr, LAM, small_paths, target_mean=1.0)
    assert np.mean(cs.xi) == pytest.approx(1.0, rel=1e-12)
    assert cs.multipliers.lambda2 == lambda2_for_mean(LAM.lambda1, cs.adjoint.qT, 1.0)


def test_damping_and_workspace(small_paths, golden_params):
    dr = tax_driver(golden_params, 0.1)
    ws = CoupledWorkspace()
    a = solve_coupled(dr, LAM, small_paths, pcfg=PicardConfig(damping=0.7), workspace=ws)
    b = solve_coupled(dr, LAM, small_paths, pcfg=PicardConfig(damping=0.7), workspace=ws)
    assert a.converged
    np.testing.assert_array_equal(a.solution.X, b.solution.X)
    c = solve_coupled(dr, LAM, small_paths, pcfg=PicardConfig(damping=0.7))
    np.testing.assert_array_equal(a.solution.X, c.solution.X)
