"""Adjoint state-price process and the coupled forward-backward fixed point."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsde import BsdeSolution, RegressionConfig, RegressionPlan, _linearisation_t, make_state, solve_bsde
from .drivers import WealthDriver
from .errors import InvalidArgumentError, NumericalBlowupError
from .multipliers import Multipliers, lambda2_for_mean, terminal_wealth
from .paths import PathBundle


@dataclass(frozen=True)
class AdjointPath:
    """Adjoint process ``dq = q (f_X dt + f_Z' dW)``, ``q_0 = 1``, stored in log space."""

    log_q: np.ndarray

    @property
    def q(self) -> np.ndarray:
        return np.exp(self.log_q)

    @property
    def qT(self) -> np.ndarray:
        return np.exp(self.log_q[:, -1])


@dataclass(frozen=True)
class PicardConfig:
    max_iters: int = 50
    tol: float = 1e-4
    damping: float = 1.0

    def __post_init__(self):
        if self.tol <= 0:
            raise InvalidArgumentError("Picard tol must be positive")
        if not 0 < self.damping <= 1:
            raise InvalidArgumentError("damping must lie in (0, 1]")
        if self.max_iters < 1:
            raise InvalidArgumentError("max_iters must be >= 1")


def _log_euler(fx: np.ndarray, fz: np.ndarray, paths: PathBundle) -> AdjointPath:
    # fx (N, n), fz (N, n, d), time-major
    if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(fz))):
        raise NumericalBlowupError("non-finite driver gradient along the wealth path")
    dt = paths.grid.dt
    dW = paths.increments
    lq = np.zeros((paths.grid.n_steps + 1, paths.n_paths))
    for k in range(fx.shape[0]):
        fzk = fz[k]
        step = (fx[k] - 0.5 * np.einsum("nd,nd->n", fzk, fzk)) * dt + np.einsum("nd,nd->n", fzk, dW[:, k, :])
        np.add(lq[k], step, out=lq[k + 1])
    if not np.all(np.isfinite(lq)):
        raise NumericalBlowupError("adjoint process overflowed")
    return AdjointPath(np.ascontiguousarray(lq.T))


def simulate_adjoint(dr: WealthDriver, sol: BsdeSolution, paths: PathBundle) -> AdjointPath:
    """Log-Euler scheme for the adjoint with gradients taken along ``sol``."""
    fx, fz = _linearisation_t(dr, sol)
    return _log_euler(fx, fz, paths)


def initial_adjoint(dr: WealthDriver, paths: PathBundle) -> AdjointPath:
    """Adjoint of the driver's linear part (or of ``dr`` itself) along zero wealth."""
    base = dr.linear_part or dr
    n, N, d = paths.n_paths, paths.grid.n_steps, paths.d
    zeros_x = np.zeros(n)
    zeros_z = np.zeros((n, d))
    fx = np.empty((N, n))
    fz = np.empty((N, n, d))
    for k in range(N):
        fx[k], fz[k] = base.grad_fn(zeros_x, zeros_z, paths.grid.times[k])
    return _log_euler(fx, fz, paths)


def _rms_change(X_old, Z_old, X_new, Z_new) -> float:
    dx2 = np.mean((X_new - X_old) ** 2, axis=0)
    dz2 = np.mean(np.sum((Z_new - Z_old) ** 2, axis=2), axis=0)
    dx2[:-1] += dz2
    return float(np.sqrt(np.max(dx2)))


class CoupledWorkspace:
    """Cache shared by repeated coupled solves on one path bundle.

    Holds the initial adjoint and the most recent regression plan so that a
    multiplier search over a fixed ensemble does not rebuild them.
    """

    def __init__(self):
        self._adjoint: dict[tuple[int, int], AdjointPath] = {}
        self.plan: RegressionPlan | None = None

    def initial_adjoint(self, dr: WealthDriver, paths: PathBundle) -> AdjointPath:
        key = (id(dr.linear_part or dr), id(paths))
        if key not in self._adjoint:
            self._adjoint = {key: initial_adjoint(dr, paths)}
        return self._adjoint[key]


@dataclass
class CoupledSolution:
    adjoint: AdjointPath
    solution: BsdeSolution
    iterations: int
    converged: bool
    multipliers: Multipliers
    xi: np.ndarray
    history: list[float] = field(default_factory=list)


def solve_coupled(
    dr: WealthDriver,
    lam: Multipliers,
    paths: PathBundle,
    rcfg: RegressionConfig | None = None,
    pcfg: PicardConfig | None = None,
    *,
    target_mean: float | None = None,
    workspace: CoupledWorkspace | None = None,
) -> CoupledSolution:
    """Picard iteration for the FBSDE with terminal condition ``X_T = (-l2 - l1 q_T)^+ / 2``.

    Iteration 0 solves the linear-part problem; each later iteration
    re-simulates the adjoint along the current wealth, rebuilds the terminal
    wealth and re-solves the BSDE.  With ``target_mean`` the multiplier
    ``lambda2`` is re-chosen every iteration so that ``mean(xi) = target_mean``.

    Non-convergence after ``pcfg.max_iters`` is reported via ``converged=False``.
    """
    rcfg = rcfg or RegressionConfig()
    pcfg = pcfg or PicardConfig()
    ws = workspace or CoupledWorkspace()
    base = dr.linear_part or dr

    template: list[RegressionPlan | None] = [None]

    def bsde(driver: WealthDriver, xi: np.ndarray, state: np.ndarray) -> BsdeSolution:
        out = solve_bsde(driver, xi, paths, state, rcfg, plan=ws.plan, template=template[0])
        ws.plan = out.plan
        return out

    def terminal(adj: AdjointPath) -> tuple[Multipliers, np.ndarray]:
        m = lam
        if target_mean is not None:
            m = Multipliers(lam.lambda1, lambda2_for_mean(lam.lambda1, adj.qT, target_mean))
        return m, terminal_wealth(m, adj.qT)

    adj = ws.initial_adjoint(dr, paths)
    cur_lam, xi = terminal(adj)
    state = make_state(adj.q)
    sol = bsde(base, xi, state)
    last = (base, xi, state, sol)

    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, pcfg.max_iters + 1):
        adj = simulate_adjoint(dr, sol, paths)
        cur_lam, xi = terminal(adj)
        state = make_state(adj.q, sol.X, rcfg.state_features)
        if last[0] is dr and np.array_equal(last[1], xi) and np.array_equal(last[2], state):
            new = last[3]
        else:
            new = bsde(dr, xi, state)
            # later iterates keep the cell partition of the first coupled plan
            template[0] = template[0] or new.plan
        last = (dr, xi, state, new)

        if pcfg.damping < 1.0:
            g = pcfg.damping
            X = (1.0 - g) * sol.X + g * new.X
            Z = (1.0 - g) * sol.Z + g * new.Z
            new = BsdeSolution(X, Z, float(X[0, 0]), new.times, new.state, new.diagnostics)
        metric = _rms_change(sol.X, sol.Z, new.X, new.Z)
        history.append(metric)
        sol = new
        if metric < pcfg.tol:
            converged = True
            break

    return CoupledSolution(adj, sol, it, converged, cur_lam, xi, history)
