"""Self-check suites run by ``mvdual verify``.

Each suite returns a list of :class:`Check` rows.  Suites that simulate take
``n_paths``, ``n_steps`` and ``seed`` so the same checks can run at reduced
resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bsde import lemma32_convergence_probe, make_state, solve_bsde, solve_variational
from .drivers import LinearParams, large_investor_driver, linear_driver, tax_driver
from .dual import PathsConfig, ProblemSpec, mc_stderr, solve_multipliers
from .fbsde import CoupledWorkspace, initial_adjoint
from .multipliers import Multipliers, terminal_wealth
from .oracle import (
    LognormalLaw,
    normal_cdf,
    oracle_solve_linear,
    partial_expectations,
    quadrature_expectation,
)
from .paths import PathBundle, make_grid, simulate_paths

GOLDEN = dict(r=0.0, theta=0.2, T=1.0, c=1.0, y=0.95)
PROBE_RHOS = (0.5, 0.25, 0.125, 0.0625)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    value: float
    bound: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<40s} value={self.value:.6g} bound={self.bound:.6g} {self.detail}".rstrip()


def golden_params() -> LinearParams:
    return LinearParams(GOLDEN["r"], GOLDEN["theta"], 1.0, GOLDEN["T"])


def golden_spec(driver=None, n_paths: int = 100_000, n_steps: int = 100, seed: int = 0) -> ProblemSpec:
    return ProblemSpec(
        driver or linear_driver(golden_params()),
        GOLDEN["T"],
        GOLDEN["y"],
        GOLDEN["c"],
        PathsConfig(n_paths, n_steps, seed, True),
    )


def golden_paths(n_paths: int, n_steps: int, seed: int) -> PathBundle:
    return simulate_paths(make_grid(GOLDEN["T"], n_steps), 1, n_paths, seed, True)


def oracle_golden():
    g = GOLDEN
    return oracle_solve_linear(g["r"], g["theta"], g["T"], g["c"], g["y"])


def _oracle_xi(paths: PathBundle) -> tuple[np.ndarray, np.ndarray]:
    o = oracle_golden()
    qT = initial_adjoint(linear_driver(golden_params()), paths).qT
    return terminal_wealth(Multipliers(o.lambda1, o.lambda2), qT), qT


# --- oracle -------------------------------------------------------------------


def suite_oracle(n_grid: int = 100, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_grid):
        K, a = rng.uniform(0.5, 2.0, 2)
        law = LognormalLaw(rng.uniform(-0.5, 0.5), rng.uniform(0.05, 1.0))
        pe = partial_expectations(K, a, law)
        q1 = quadrature_expectation(lambda L: K - a * L, K, a, law)
        q2 = quadrature_expectation(lambda L: L * (K - a * L), K, a, law)
        worst = max(worst, abs(pe.first - q1) / abs(q1), abs(pe.second - q2) / abs(q2))

    cdf_err = max(
        abs(normal_cdf(0.0) - 0.5),
        max(abs(normal_cdf(x) + normal_cdf(-x) - 1.0) for x in np.linspace(0.0, 8.0, 33)),
    )
    o = oracle_golden()
    law = LognormalLaw(-(GOLDEN["r"] + 0.5 * GOLDEN["theta"] ** 2) * GOLDEN["T"], GOLDEN["theta"])
    pe = partial_expectations(-o.lambda2, o.lambda1, law)
    self_err = max(abs(0.5 * pe.first - GOLDEN["c"]) / GOLDEN["c"], abs(0.5 * pe.second - GOLDEN["y"]) / GOLDEN["y"])
    return [
        Check("oracle.partial_expectation_quadrature", worst <= 1e-8, worst, 1e-8, f"grid={n_grid}"),
        Check("oracle.normal_cdf_symmetry", cdf_err <= 1e-14, cdf_err, 1e-14),
        Check("oracle.normal_cdf_1.96", abs(normal_cdf(1.96) - 0.9750021) <= 1e-6, abs(normal_cdf(1.96) - 0.9750021), 1e-6),
        Check("oracle.self_consistency", self_err <= 1e-8, self_err, 1e-8),
        Check("oracle.positive_variance", o.variance > 0, o.variance, 0.0),
    ]


# --- duality identity -----------------------------------------------------------


def perturbations(paths: PathBundle, n: int, seed: int) -> list[np.ndarray]:
    """Bounded smooth functionals of ``W_T`` used as terminal perturbations."""
    rng = np.random.default_rng(seed)
    W = paths.terminal()[:, 0] / math.sqrt(paths.grid.T)
    out = []
    for _ in range(n):
        a, b, s = rng.normal(size=3)
        out.append(np.tanh(a + b * W) + 0.5 * s * np.cos(W))
    return out


def duality_errors(n_paths: int = 100_000, n_steps: int = 100, seed: int = 0, n_pert: int = 5):
    """Per perturbation: ``(|dX0 - mean(xi_hat q_T)|, combined standard error)``."""
    paths = golden_paths(n_paths, n_steps, seed)
    dr = linear_driver(golden_params())
    xi, qT = _oracle_xi(paths)
    state = make_state(initial_adjoint(dr, paths).q)
    base = solve_bsde(dr, xi, paths, state)
    dt = paths.grid.dt
    rows = []
    for xh in perturbations(paths, n_pert, seed + 1):
        var = solve_variational(dr, base, xh, paths)
        priced = xh * qT
        # the step-0 value is the mean of these per-path one-step estimates
        one_step = var.X[:, 1] + dt * (dr.eval_fn(var.X[:, 1], var.Z[:, 0, :], 0.0))
        se = math.hypot(mc_stderr(priced, True), mc_stderr(one_step, True))
        rows.append((abs(var.X0 - float(np.mean(priced))), se))
    return rows


def suite_duality(n_paths: int = 100_000, n_steps: int = 100, seed: int = 0) -> list[Check]:
    rows = duality_errors(n_paths, n_steps, seed)
    return [
        Check(f"duality.perturbation_{i}", err <= 3 * se, err, 3 * se, f"n_paths={n_paths}")
        for i, (err, se) in enumerate(rows)
    ]


# --- KKT ------------------------------------------------------------------------


def suite_kkt(n_paths: int = 100_000, n_steps: int = 100, seed: int = 0) -> list[Check]:
    spec = golden_spec(n_paths=n_paths, n_steps=n_steps, seed=seed)
    _, rep = solve_multipliers(spec)
    return [
        Check("kkt.max_violation", rep.kkt_max_violation == 0.0, rep.kkt_max_violation, 0.0),
        Check(
            "kkt.complementary_slackness",
            rep.complementary_slackness_gap <= spec.tol_y,
            rep.complementary_slackness_gap,
            spec.tol_y,
        ),
        Check("kkt.zero_set_fraction_in_unit", 0.0 <= rep.zero_set_fraction <= 1.0, rep.zero_set_fraction, 1.0),
    ]


# --- comparison -------------------------------------------------------------------


def comparison_x0(n_paths: int, n_steps: int, seed: int, alpha: float = 0.1):
    """``(X0_tax - X0_linear, combined standard error)`` for the oracle terminal wealth."""
    paths = golden_paths(n_paths, n_steps, seed)
    lin = linear_driver(golden_params())
    tax = tax_driver(golden_params(), alpha)
    xi, qT = _oracle_xi(paths)
    state = make_state(initial_adjoint(lin, paths).q)
    x_lin = solve_bsde(lin, xi, paths, state)
    x_tax = solve_bsde(tax, xi, paths, state, plan=x_lin.plan)
    se = math.sqrt(2.0) * mc_stderr(xi * qT, True)
    return x_tax.X0 - x_lin.X0, se


def comparison_variance(n_paths: int, n_steps: int, seed: int, alpha: float = 0.1):
    """``(V_tax - V_linear, combined standard error, reports)`` on the golden instance."""
    paths = golden_paths(n_paths, n_steps, seed)
    _, lin = solve_multipliers(golden_spec(None, n_paths, n_steps, seed), paths)
    _, tax = solve_multipliers(golden_spec(tax_driver(golden_params(), alpha), n_paths, n_steps, seed), paths)
    se = math.hypot(lin.variance_stderr, tax.variance_stderr)
    return tax.variance - lin.variance, se, (lin, tax)


def suite_comparison(n_paths: int = 100_000, n_steps: int = 100, seed: int = 0) -> list[Check]:
    dx, se_x = comparison_x0(n_paths, n_steps, seed)
    dv, se_v, _ = comparison_variance(n_paths, n_steps, seed)
    return [
        Check("comparison.x0_tax_ge_linear", dx >= -3 * se_x, dx, -3 * se_x),
        Check("comparison.variance_tax_ge_linear", dv >= -3 * se_v, dv, -3 * se_v),
    ]


# --- variational expansion ---------------------------------------------------------


def probe_rows(n_paths: int = 20_000, n_steps: int = 50, seed: int = 0):
    paths = golden_paths(n_paths, n_steps, seed)
    dr = large_investor_driver(golden_params())
    xi, _ = _oracle_xi(paths)
    xh = perturbations(paths, 1, seed + 7)[0]
    return lemma32_convergence_probe(dr, xi, xh, paths, PROBE_RHOS)


def suite_variational(n_paths: int = 20_000, n_steps: int = 50, seed: int = 0) -> list[Check]:
    rows = probe_rows(n_paths, n_steps, seed)
    x_ok = all(b.x_error < a.x_error for a, b in zip(rows, rows[1:]))
    z_ok = all(b.z_error < a.z_error for a, b in zip(rows, rows[1:]))
    detail = " ".join(f"rho={r.rho:g}:{r.x_error:.3g}/{r.z_error:.3g}" for r in rows)
    return [
        Check("variational.x_error_decreasing", x_ok, rows[-1].x_error, rows[0].x_error, detail),
        Check("variational.z_error_decreasing", z_ok, rows[-1].z_error, rows[0].z_error),
    ]


SUITES: dict[str, Callable[..., list[Check]]] = {
    "oracle": suite_oracle,
    "duality": suite_duality,
    "kkt": suite_kkt,
    "comparison": suite_comparison,
    "variational": suite_variational,
}


def run_suites(name: str, **resolution) -> list[Check]:
    """Run one suite or ``"all"``; ``resolution`` keys apply to simulating suites."""
    names = list(SUITES) if name == "all" else [name]
    out: list[Check] = []
    for n in names:
        fn = SUITES[n]
        out.extend(fn() if n == "oracle" else fn(**resolution))
    return out
