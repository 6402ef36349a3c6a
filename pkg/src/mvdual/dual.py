"""Outer dual method: multiplier search, KKT checks, feasibility and frontier sweeps."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .bsde import RegressionConfig, make_state, solve_bsde
from .drivers import WealthDriver
from .errors import (
    BracketError,
    InfeasibilityAnalysisError,
    InvalidArgumentError,
    MvdualError,
    NumericalBlowupError,
    PicardDivergenceError,
)
from .fbsde import CoupledSolution, CoupledWorkspace, PicardConfig, solve_coupled
from .multipliers import Multipliers, kkt_argument, lambda2_for_mean, terminal_wealth
from .paths import PathBundle, make_grid, simulate_paths

__all__ = [
    "PathsConfig",
    "ProblemSpec",
    "SolveReport",
    "terminal_wealth",
    "constraint_residuals",
    "solve_multipliers",
    "kkt_verify",
    "lagrangian",
    "min_investment",
    "frontier",
    "random_admissible",
    "mc_stderr",
]

# Membership tolerance for the zero set M = {xi = 0}
KKT_TOL = 1e-10


@dataclass(frozen=True)
class PathsConfig:
    n_paths: int = 100_000
    n_steps: int = 100
    seed: int = 0
    antithetic: bool = True


@dataclass(frozen=True)
class ProblemSpec:
    """A mean-variance problem: minimise Var(xi) s.t. E[xi] = c, X0(xi) <= y, xi >= 0."""

    driver: WealthDriver
    T: float
    y: float
    c: float
    paths: PathsConfig = field(default_factory=PathsConfig)
    rcfg: RegressionConfig = field(default_factory=RegressionConfig)
    pcfg: PicardConfig = field(default_factory=PicardConfig)

    def __post_init__(self):
        for name in ("T", "y", "c"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidArgumentError(f"{name} must be positive, got {v}")

    @property
    def d(self) -> int:
        return self.driver.d

    @property
    def tol_c(self) -> float:
        return 1e-3 * self.c

    @property
    def tol_y(self) -> float:
        return 1e-3 * self.y

    def make_paths(self) -> PathBundle:
        p = self.paths
        return simulate_paths(make_grid(self.T, p.n_steps), self.d, p.n_paths, p.seed, p.antithetic)


def mc_stderr(values: np.ndarray, antithetic: bool = False) -> float:
    """Standard error of ``mean(values)``; antithetic pairs are averaged first."""
    v = np.asarray(values, dtype=np.float64)
    if antithetic and v.shape[0] % 2 == 0:
        v = 0.5 * (v[0::2] + v[1::2])
    if v.shape[0] < 2:
        return 0.0
    return float(np.std(v, ddof=1) / math.sqrt(v.shape[0]))


@dataclass
class SolveReport:
    multipliers: Multipliers | None
    variance: float
    variance_stderr: float
    mean_xi: float
    X0: float
    kkt_max_violation: float
    kkt: dict
    complementary_slackness_gap: float
    zero_set_fraction: float
    converged: bool
    picard_iterations: int
    degenerate: bool
    mean_gap: float = 0.0
    budget_gap: float = 0.0
    min_wealth: float = 0.0
    negative_fraction: float = 0.0
    evaluations: int = 0
    bracket: tuple[float, float] | None = None
    method: str = ""
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        m = self.multipliers
        out["multipliers"] = None if m is None else {"lambda1": m.lambda1, "lambda2": m.lambda2}
        out["bracket"] = None if self.bracket is None else list(self.bracket)
        return out


# --- KKT and Lagrangian -----------------------------------------------------


def kkt_verify(
    xi: np.ndarray, qT: np.ndarray, lam: Multipliers, tol: float = KKT_TOL
) -> tuple[float, float, float]:
    """KKT residuals of ``xi`` against ``2 xi + lambda1 q_T + lambda2``.

    Returns ``(max violation on M, max violation on M^c, max complementarity)``
    with ``M = {xi <= tol}``.  Empty sets contribute 0.
    """
    xi = np.asarray(xi, dtype=np.float64)
    g = 2.0 * xi - kkt_argument(lam, qT)
    on_m = xi <= tol
    v_m = float(np.max(np.maximum(-g[on_m], 0.0))) if on_m.any() else 0.0
    v_mc = float(np.max(np.abs(g[~on_m]))) if (~on_m).any() else 0.0
    comp = float(np.max(np.minimum(xi, np.abs(g)))) if xi.size else 0.0
    return v_m, v_mc, comp


def _zero_state(spec: ProblemSpec, paths: PathBundle, ws: CoupledWorkspace) -> np.ndarray:
    return make_state(ws.initial_adjoint(spec.driver, paths).q)


def lagrangian(
    xi: np.ndarray,
    lam: Multipliers,
    spec: ProblemSpec,
    paths: PathBundle,
    state: np.ndarray | None = None,
    workspace: CoupledWorkspace | None = None,
) -> float:
    """``E xi^2 - c^2 + lambda1 (X0(xi) - y) + lambda2 (E xi - c)``.

    ``X0(xi)`` is the BSDE value on ``state`` (default: the linear-part adjoint).
    """
    xi = np.asarray(xi, dtype=np.float64)
    if np.any(xi < 0):
        raise InvalidArgumentError("lagrangian needs a non-negative terminal wealth")
    ws = workspace or CoupledWorkspace()
    if state is None:
        state = _zero_state(spec, paths, ws)
    sol = solve_bsde(spec.driver, xi, paths, state, spec.rcfg, plan=ws.plan)
    ws.plan = sol.plan
    c = spec.c
    return float(np.mean(xi * xi) - c * c + lam.lambda1 * (sol.X0 - spec.y) + lam.lambda2 * (np.mean(xi) - c))


def random_admissible(paths: PathBundle, c: float, n: int, seed: int = 0) -> list[np.ndarray]:
    """``n`` random terminal wealths ``xi >= 0`` with mean ``c``.

    Each is ``c + s (exp(b'W_T) / mean(exp(b'W_T)) - 1) + shift``, clamped at 0
    and rescaled to mean ``c``.
    """
    rng = np.random.default_rng(seed)
    WT = paths.terminal()
    out = []
    for _ in range(n):
        b = rng.normal(0.0, 1.0, paths.d)
        e = np.exp(WT @ b)
        s = rng.uniform(0.0, 2.0) * c
        shift = rng.uniform(-0.5, 0.5) * c
        xi = np.maximum(c + s * (e / e.mean() - 1.0) + shift, 0.0)
        if xi.mean() <= 0:
            xi = np.full(paths.n_paths, c)
        out.append(xi * (c / xi.mean()))
    return out


# --- constraint residuals and the multiplier search ---------------------------


@dataclass
class Residuals:
    mean_gap: float
    budget_gap: float
    reliable: bool
    coupled: CoupledSolution


def _residuals(
    lam: Multipliers,
    spec: ProblemSpec,
    paths: PathBundle,
    ws: CoupledWorkspace,
    target_mean: float | None = None,
) -> Residuals:
    cs = solve_coupled(spec.driver, lam, paths, spec.rcfg, spec.pcfg, target_mean=target_mean, workspace=ws)
    return Residuals(float(np.mean(cs.xi)) - spec.c, cs.solution.X0 - spec.y, cs.converged, cs)


def constraint_residuals(
    lam: Multipliers, spec: ProblemSpec, paths: PathBundle, workspace: CoupledWorkspace | None = None
) -> tuple[float, float, dict]:
    """``(mean(xi) - c, X0 - y, diagnostics)`` at fixed multipliers on ``paths``."""
    r = _residuals(lam, spec, paths, workspace or CoupledWorkspace())
    diag = {
        "reliable": r.reliable,
        "picard_iterations": r.coupled.iterations,
        "history": list(r.coupled.history),
        "X0": r.coupled.solution.X0,
    }
    return r.mean_gap, r.budget_gap, diag


def constant_wealth_cost(spec: ProblemSpec, paths: PathBundle, workspace: CoupledWorkspace | None = None) -> float:
    """X0 of the constant terminal wealth ``xi = c``."""
    ws = workspace or CoupledWorkspace()
    xi = np.full(paths.n_paths, spec.c)
    sol = solve_bsde(spec.driver, xi, paths, _zero_state(spec, paths, ws), spec.rcfg, plan=ws.plan)
    ws.plan = sol.plan
    return sol.X0


class _Outer:
    """``lambda1 -> X0 - y`` along the inner curve ``mean(xi) = c``.

    Only gaps are memoised; the full solution is kept for the latest point.
    """

    def __init__(self, spec: ProblemSpec, paths: PathBundle, ws: CoupledWorkspace):
        self.spec, self.paths, self.ws = spec, paths, ws
        self.gaps: dict[float, float] = {}
        self.last: tuple[float, Residuals] | None = None

    def __call__(self, log_l1: float) -> float:
        log_l1 = float(log_l1)
        if log_l1 not in self.gaps:
            self.gaps[log_l1] = self.at(math.exp(log_l1)).budget_gap
        return self.gaps[log_l1]

    def at(self, l1: float) -> Residuals:
        if self.last is None or self.last[0] != l1:
            self.last = None  # release the previous solution first
            # lambda2 is a placeholder; target_mean re-solves it
            lam = Multipliers(l1, -1.0)
            self.last = (l1, _residuals(lam, self.spec, self.paths, self.ws, target_mean=self.spec.c))
        return self.last[1]


def _bracket(outer: _Outer, q_min: float, c: float) -> tuple[float, float]:
    # geometric scan in log lambda1; returns (log lo, log hi) with gap(lo) > 0 > gap(hi)
    lo_limit = math.log(1e-6)
    hi = math.log(2.0 * c / q_min + 2.0 * c)
    for _ in range(20):
        if outer(hi) < 0:
            break
        hi += math.log(4.0)
    else:
        raise BracketError("budget gap stays non-negative for large lambda1", (1e-6, math.exp(hi)))
    lo = hi
    while lo > lo_limit:
        nxt = max(lo - math.log(8.0), lo_limit)
        if outer(nxt) > 0:
            return nxt, lo
        lo = nxt
    raise BracketError("budget gap stays negative for small lambda1", (1e-6, math.exp(hi)))


def _quasi_newton(spec: ProblemSpec, paths: PathBundle, ws: CoupledWorkspace, start: Multipliers) -> Residuals:
    # damped Newton on (log lambda1, lambda2) with a forward-difference Jacobian
    def F(v):
        r = _residuals(Multipliers(float(np.exp(v[0])), float(v[1])), spec, paths, ws)
        return np.array([r.mean_gap / spec.c, r.budget_gap / spec.y]), r

    v = np.array([np.log(start.lambda1), start.lambda2])
    f, r = F(v)
    for _ in range(40):
        if abs(r.mean_gap) <= spec.tol_c and abs(r.budget_gap) <= spec.tol_y:
            return r
        h = 1e-4 * np.maximum(1.0, np.abs(v))
        J = np.empty((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = h[j]
            J[:, j] = (F(v + e)[0] - f) / h[j]
        try:
            step = np.linalg.solve(J, -f)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-3:
            f_new, r_new = F(v + t * step)
            if np.linalg.norm(f_new) < np.linalg.norm(f):
                break
            t *= 0.5
        else:
            break
        v, f, r = v + t * step, f_new, r_new
    raise BracketError("quasi-Newton fallback did not reach the constraint tolerances")


def _report(
    spec: ProblemSpec, paths: PathBundle, r: Residuals, evaluations: int, bracket, method: str
) -> SolveReport:
    cs = r.coupled
    lam = cs.multipliers
    xi, qT = cs.xi, cs.adjoint.qT
    v_m, v_mc, comp = kkt_verify(xi, qT, lam)
    min_x, neg = cs.solution.negativity()
    warnings = []
    if min_x < -1e-2 * spec.c:
        warnings.append(f"wealth dips to {min_x:.3e}, below -1e-2 * c")
    return SolveReport(
        multipliers=lam,
        variance=float(np.mean(xi * xi) - spec.c**2),
        variance_stderr=mc_stderr(xi * xi, paths.antithetic),
        mean_xi=float(np.mean(xi)),
        X0=cs.solution.X0,
        kkt_max_violation=max(v_m, v_mc, comp),
        kkt={"zero_set": v_m, "positive_set": v_mc, "complementarity": comp},
        complementary_slackness_gap=abs(cs.solution.X0 - spec.y),
        zero_set_fraction=float(np.mean(xi <= KKT_TOL)),
        converged=bool(cs.converged),
        picard_iterations=cs.iterations,
        degenerate=False,
        mean_gap=r.mean_gap,
        budget_gap=r.budget_gap,
        min_wealth=min_x,
        negative_fraction=neg,
        evaluations=evaluations,
        bracket=bracket,
        method=method,
        warnings=warnings,
    )


def degenerate_report(spec: ProblemSpec, x0_const: float) -> SolveReport:
    """Report for ``y >= X0(c)``: the constant plan is admissible and riskless."""
    return SolveReport(
        multipliers=None,
        variance=0.0,
        variance_stderr=0.0,
        mean_xi=spec.c,
        X0=x0_const,
        kkt_max_violation=0.0,
        kkt={"zero_set": 0.0, "positive_set": 0.0, "complementarity": 0.0},
        complementary_slackness_gap=abs(x0_const - spec.y),
        zero_set_fraction=0.0,
        converged=True,
        picard_iterations=0,
        degenerate=True,
        budget_gap=x0_const - spec.y,
        method="degenerate",
    )


def solve_multipliers(
    spec: ProblemSpec, paths: PathBundle | None = None, workspace: CoupledWorkspace | None = None
) -> tuple[Multipliers | None, SolveReport]:
    """Solve for ``(lambda1, lambda2)`` so that ``E xi = c`` and ``X0 = y``.

    Inner: ``lambda2`` is solved exactly for ``mean(xi) = c`` at every Picard
    step.  Outer: Brent's method on ``log lambda1`` for ``X0 - y = 0``
    after a geometric bracket scan.  If the bracket scan fails a damped
    quasi-Newton iteration on both multipliers is tried.

    Raises
    ------
    BracketError
        No sign change of the budget gap and the fallback failed.
    PicardDivergenceError
        The coupled iteration did not converge at the returned multipliers;
        ``err.report`` holds the partial report.
    """
    paths = paths or spec.make_paths()
    ws = workspace or CoupledWorkspace()
    x0_const = constant_wealth_cost(spec, paths, ws)
    if spec.y >= x0_const:
        return None, degenerate_report(spec, x0_const)

    outer = _Outer(spec, paths, ws)
    q_min = float(ws.initial_adjoint(spec.driver, paths).qT.min())
    method, bracket = "brent", None
    try:
        lo, hi = _bracket(outer, q_min, spec.c)
        bracket = (math.exp(lo), math.exp(hi))
        root = optimize.brentq(outer, lo, hi, xtol=1e-10, rtol=1e-12, maxiter=100)
        r = outer.at(math.exp(root))
    except BracketError:
        method = "quasi-newton"
        l1 = 1.0 / max(q_min, 1e-12)
        start = Multipliers(l1, lambda2_for_mean(l1, ws.initial_adjoint(spec.driver, paths).qT, spec.c))
        r = _quasi_newton(spec, paths, ws, start)

    report = _report(spec, paths, r, len(outer.gaps), bracket, method)
    if not r.reliable:
        raise PicardDivergenceError(
            f"coupled iteration did not converge in {spec.pcfg.max_iters} iterations", report
        )
    if abs(r.budget_gap) > spec.tol_y or abs(r.mean_gap) > spec.tol_c:
        report.warnings.append("constraint residuals above tolerance")
    return report.multipliers, report


# --- feasibility --------------------------------------------------------------


@dataclass(frozen=True)
class FeasibilityResult:
    x_bar: float
    lambda_star: float
    upper_bound: bool
    kappa: float | None = None


def min_investment(
    spec: ProblemSpec, paths: PathBundle | None = None, n_kappa: int = 25, workspace: CoupledWorkspace | None = None
) -> FeasibilityResult:
    """Smallest initial wealth that reaches mean ``c`` with ``xi >= 0``.

    For the linear driver the inner infimum is
    ``inf_{xi >= 0} mean[(q_T + lam) xi] - lam c``, which is ``-lam c`` when
    ``q_T + lam >= 0`` on every path and ``-inf`` otherwise, so the dual
    maximiser is ``lam* = -min q_T`` and ``x_bar = c min q_T``.

    Otherwise the inner problem is restricted to ``xi = (c / kappa) 1{q_T <= Q(kappa)}``
    over a geometric grid of quantile levels ``kappa``; the minimum over the
    grid is an upper bound on ``x_bar`` and ``lam*`` is the slope
    ``-dX0/dc`` there.
    """
    paths = paths or spec.make_paths()
    ws = workspace or CoupledWorkspace()
    dr = spec.driver
    qT = ws.initial_adjoint(dr, paths).qT
    if not np.all(np.isfinite(qT)):
        raise InfeasibilityAnalysisError("adjoint terminal values are not finite")
    if dr.linear_part is dr:
        q_min = float(qT.min())
        return FeasibilityResult(spec.c * q_min, -q_min, upper_bound=False)

    n = paths.n_paths
    state = make_state(ws.initial_adjoint(dr, paths).q)
    order = np.argsort(qT, kind="stable")
    kappas = np.unique(np.geomspace(min(10.0 / n, 1.0), 1.0, n_kappa))

    def cost(kappa: float, scale: float) -> float:
        m = max(int(round(kappa * n)), 1)
        xi = np.zeros(n)
        xi[order[:m]] = scale * spec.c * n / m
        sol = solve_bsde(dr, xi, paths, state, spec.rcfg, plan=ws.plan)
        ws.plan = sol.plan
        return sol.X0

    best, best_k = math.inf, None
    for k in kappas:
        try:
            v = cost(k, 1.0)
        except (NumericalBlowupError, MvdualError):
            continue
        if np.isfinite(v) and v < best:
            best, best_k = v, float(k)
    if best_k is None:
        raise InfeasibilityAnalysisError("inner problem is unbounded or failed on the whole kappa scan")
    h = 1e-3
    slope = (cost(best_k, 1.0 + h) - cost(best_k, 1.0 - h)) / (2.0 * h * spec.c)
    return FeasibilityResult(float(best), float(-slope), upper_bound=True, kappa=best_k)


# --- frontier -----------------------------------------------------------------


@dataclass
class FrontierRow:
    c: float
    variance: float
    lambda1: float
    lambda2: float
    degenerate: bool
    converged: bool
    error: str | None = None


def frontier(spec: ProblemSpec, c_values, paths: PathBundle | None = None) -> list[FrontierRow]:
    """Solve the problem for each target ``c`` on one shared path bundle."""
    c_values = [float(c) for c in c_values]
    if any(c <= 0 for c in c_values):
        raise InvalidArgumentError("frontier targets must be positive")
    paths = paths or spec.make_paths()
    ws = CoupledWorkspace()
    rows = []
    for c in c_values:
        sub = dataclasses.replace(spec, c=c)
        try:
            lam, rep = solve_multipliers(sub, paths, ws)
            rows.append(
                FrontierRow(
                    c,
                    rep.variance,
                    lam.lambda1 if lam else math.nan,
                    lam.lambda2 if lam else math.nan,
                    rep.degenerate,
                    rep.converged,
                )
            )
        except MvdualError as err:
            rep = getattr(err, "report", None)
            rows.append(
                FrontierRow(
                    c,
                    rep.variance if rep else math.nan,
                    rep.multipliers.lambda1 if rep and rep.multipliers else math.nan,
                    rep.multipliers.lambda2 if rep and rep.multipliers else math.nan,
                    False,
                    False,
                    error=f"{type(err).__name__}: {err}",
                )
            )
    return rows


__all__ += ["FeasibilityResult", "FrontierRow", "Residuals", "constant_wealth_cost", "degenerate_report"]
