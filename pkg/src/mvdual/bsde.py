"""Regression Monte Carlo solver for the wealth BSDE ``-dX = f dt - Z'dW``."""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass, field
from typing import Callable, Literal, NamedTuple

import numpy as np

from .drivers import WealthDriver
from .errors import (
    IllConditionedBasisError,
    InvalidArgumentError,
    InvalidModelError,
    NumericalBlowupError,
    UnsupportedForNonsmoothError,
)
from .paths import PathBundle

MAX_CONDITION = 1e12

StateFeatures = Literal["adjoint_state", "wealth_proxy", "both"]


@dataclass(frozen=True)
class RegressionConfig:
    """Regression settings for the backward scheme.

    The basis is piecewise: paths are split into ``n_bins`` equal-count cells
    on the first state feature and, within each cell, targets are projected
    on all monomials of total degree <= ``basis_degree`` in the (cell
    standardised) features.  ``n_bins = 1`` is a single global polynomial.
    With ``clip_to_range`` the fitted ``E[X_{k+1} | state]`` is clipped to the
    sample range of ``X_{k+1}``.
    """

    basis_degree: int = 3
    state_features: StateFeatures = "adjoint_state"
    ridge: float = 1e-8
    picard_substeps: int = 2
    n_bins: int = 32
    clip_to_range: bool = True

    def __post_init__(self):
        if self.basis_degree < 0:
            raise InvalidArgumentError("basis_degree must be >= 0")
        if self.ridge < 0:
            raise InvalidArgumentError("ridge must be >= 0")
        if self.picard_substeps < 0:
            raise InvalidArgumentError("picard_substeps must be >= 0")
        if self.n_bins < 1:
            raise InvalidArgumentError("n_bins must be >= 1")
        if self.state_features not in ("adjoint_state", "wealth_proxy", "both"):
            raise InvalidArgumentError(f"unknown state_features {self.state_features!r}")


@dataclass
class BsdeSolution:
    """Per-path wealth ``X`` (n, N+1) and loading ``Z`` (n, N, d).

    ``state`` keeps the regression features the solution was computed with so
    that linearisations around it reuse the same projections.
    """

    X: np.ndarray
    Z: np.ndarray
    X0: float
    times: np.ndarray
    state: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    plan: "RegressionPlan | None" = field(default=None, repr=False, compare=False)
    # per step: paths whose conditional mean was clipped, and the path it was clipped to
    clipping: list | None = field(default=None, repr=False, compare=False)

    def negativity(self) -> tuple[float, float]:
        """Return (min of X over paths and times, fraction of grid points with X < 0)."""
        return float(self.X.min()), float(np.mean(self.X < 0.0))


def make_state(
    q: np.ndarray, wealth: np.ndarray | None = None, features: StateFeatures = "adjoint_state"
) -> np.ndarray:
    """Stack regression features into shape ``(n_paths, N+1, k)``."""
    if features == "adjoint_state" or (features == "both" and wealth is None):
        return q[:, :, None]
    if wealth is None:
        raise InvalidArgumentError("wealth_proxy features need a wealth process")
    if features == "wealth_proxy":
        return wealth[:, :, None]
    return np.stack([q, wealth], axis=2)


@functools.lru_cache(maxsize=None)
def _exponents(k: int, degree: int) -> tuple[tuple[int, ...], ...]:
    exps = [e for e in itertools.product(range(degree + 1), repeat=k) if sum(e) <= degree]
    return tuple(sorted(exps, key=lambda e: (sum(e), tuple(-v for v in e))))


def _monomials(u: np.ndarray, degree: int) -> np.ndarray:
    """Rows of all monomials of total degree <= ``degree``, shape (m, n)."""
    k, n = u.shape
    if k == 1:
        B = np.empty((degree + 1, n))
        B[0] = 1.0
        for j in range(1, degree + 1):
            np.multiply(B[j - 1], u[0], out=B[j])
        return B
    rows = []
    for e in _exponents(k, degree):
        row = np.ones(n)
        for j, p in enumerate(e):
            for _ in range(p):
                row = row * u[j]
        rows.append(row)
    return np.array(rows)


@dataclass
class _StepFit:
    """Regression design of one step, with paths sorted by the first feature.

    ``perm`` orders paths so that cell ``c`` occupies ``starts[c]:starts[c+1]``
    and ``inv`` is its inverse.  With ``d_noise > 0`` the design also carries
    the products of the polynomial basis with the scaled increments
    ``dW / sqrt(dt)``.
    """

    perm: np.ndarray | None
    inv: np.ndarray | None
    starts: np.ndarray
    u: np.ndarray | None
    gram: np.ndarray
    condition: float
    d_noise: int = 0

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.starts)

    def basis(self, degree: int) -> np.ndarray:
        n = int(self.starts[-1])
        return np.ones((1, n)) if self.u is None else _monomials(self.u, degree)

    def sort(self, rows: np.ndarray) -> np.ndarray:
        return rows if self.perm is None else np.take(rows, self.perm, axis=1)

    def unsort(self, rows: np.ndarray) -> np.ndarray:
        return rows if self.inv is None else np.take(rows, self.inv, axis=1)


def _design(B: np.ndarray, noise: np.ndarray | None) -> np.ndarray:
    if noise is None:
        return B
    return np.concatenate([B] + [B * w for w in noise], axis=0)


def _cell_sums(D: np.ndarray, T: np.ndarray, starts: np.ndarray) -> np.ndarray:
    # per-cell D_c T_c', shape (nc, rows of D, rows of T); cells are contiguous
    out = np.empty((starts.shape[0] - 1, D.shape[0], T.shape[0]))
    for c in range(out.shape[0]):
        s, e = starts[c], starts[c + 1]
        out[c] = D[:, s:e] @ T[:, s:e].T
    return out


def _fit_step(
    features: np.ndarray,
    cfg: RegressionConfig,
    step: int,
    noise: np.ndarray | None = None,
    cells: _StepFit | None = None,
) -> _StepFit:
    """Cells, standardised features and cell normal matrices for one step.

    ``noise`` (r, n), when given, adds the basis-times-noise columns.  With
    ``cells`` the partition of an earlier fit is reused instead of ranking
    the first feature.
    """
    n = features.shape[0]
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    keep = sd > 1e-12 * (1.0 + np.abs(mu))
    perm = inv = u = None
    if not keep.any() or (cfg.basis_degree == 0 and cfg.n_bins == 1):
        starts = np.array([0, n])
    else:
        x = features[:, keep].T
        nc = min(cfg.n_bins, n)
        if cells is not None and cells.perm is not None and cells.starts.shape[0] == nc + 1:
            perm, inv = cells.perm, cells.inv
            xs = np.take(x, perm, axis=1)
        elif nc > 1:
            perm = np.argsort(x[0])
            inv = np.empty_like(perm)
            inv[perm] = np.arange(n)
            xs = np.take(x, perm, axis=1)
        else:
            xs = x.copy()
        starts = (np.arange(nc + 1) * n) // nc
        reps = np.diff(starts)
        counts = reps.astype(np.float64)
        u = np.empty_like(xs)
        for j in range(xs.shape[0]):
            mu_c = np.add.reduceat(xs[j], starts[:-1]) / counts
            dev = xs[j] - np.repeat(mu_c, reps)
            sd_c = np.sqrt(np.add.reduceat(dev * dev, starts[:-1]) / counts)
            u[j] = dev / np.repeat(np.maximum(sd_c, 1e-300), reps)
    fit = _StepFit(perm, inv, starts, u, np.empty(0), 1.0, 0 if noise is None else noise.shape[0])
    D = _design(fit.basis(cfg.basis_degree), None if noise is None else fit.sort(noise))
    gram = _cell_sums(D, D, starts)
    gram = 0.5 * (gram + gram.transpose(0, 2, 1))
    counts = fit.counts.astype(np.float64)
    M = D.shape[0]
    idx = np.arange(1, M)
    gram[:, idx, idx] += cfg.ridge * counts[:, None]
    cond = float(np.max(np.linalg.cond(gram / counts[:, None, None]))) if M > 1 else 1.0
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise IllConditionedBasisError(step, cond)
    fit.gram, fit.condition = gram, cond
    return fit


def _evaluate(fit: _StepFit, B: np.ndarray, coef: np.ndarray) -> np.ndarray:
    # sum_i B[i] * coef[cell, i] on sorted paths, coef (nc, m)
    reps = fit.counts
    acc = np.repeat(coef[:, 0], reps)
    for i in range(1, B.shape[0]):
        acc += B[i] * np.repeat(coef[:, i], reps)
    return acc


def _project(fit: _StepFit, targets: np.ndarray, cfg: RegressionConfig, clip: bool = False) -> np.ndarray:
    """Fitted values of ``targets`` given as (p, n) rows on a plain design; returns (p, n).

    With ``clip`` the first row is clipped to the sample range of its target.
    """
    ts = fit.sort(targets)
    B = fit.basis(cfg.basis_degree)
    coef = np.linalg.solve(fit.gram, _cell_sums(B, ts, fit.starts))
    fs = np.stack([_evaluate(fit, B, coef[:, :, j]) for j in range(ts.shape[0])])
    if clip:
        np.clip(fs[0], ts[0].min(), ts[0].max(), out=fs[0])
    return fit.unsort(fs)


def _martingale_project(
    fit: _StepFit,
    Y: np.ndarray,
    noise: np.ndarray,
    cfg: RegressionConfig,
    d: int,
    clipped: tuple | None = None,
) -> tuple[np.ndarray, np.ndarray, tuple | None]:
    """Conditional mean of ``Y`` and its loading on the first ``d`` noise rows.

    The mean ``a(state)`` is the plain projection on the polynomial block
    (which preserves cell means of ``Y``); the loading ``b(state)`` comes from
    the joint fit ``Y ~ a + b' noise``, which removes the level of ``Y`` from
    the noise of the estimate.

    With range clipping the third output records the paths clipped below
    and above and the (possibly tied) paths attaining the sample extremes.
    Passing such a record as ``clipped`` applies the one-sided derivative of
    that clipping instead, which turns the call into the tangent of an
    earlier one.
    """
    ys = fit.sort(Y[None, :])
    B = fit.basis(cfg.basis_degree)
    m = B.shape[0]
    T = np.concatenate([ys, fit.sort(noise) * ys], axis=0)
    # (nc, m, 1 + r) -> (nc, m (1 + r)) in the column order of _design
    rhs = _cell_sums(B, T, fit.starts).transpose(0, 2, 1).reshape(fit.gram.shape[0], -1)
    a = _evaluate(fit, B, np.linalg.solve(fit.gram[:, :m, :m], rhs[:, :m, None])[:, :, 0])
    coef = np.linalg.solve(fit.gram, rhs[:, :, None])[:, :, 0]
    b = np.stack([_evaluate(fit, B, coef[:, m * (j + 1) : m * (j + 2)]) for j in range(d)])
    out = fit.unsort(np.concatenate([a[None, :], b], axis=0))
    a, record = out[0], None
    if clipped is not None:
        low, high, argmin, argmax = clipped
        if low.size:
            a[low] = Y[argmin].min()
        if high.size:
            a[high] = Y[argmax].max()
    elif cfg.clip_to_range:
        lo, hi = Y.min(), Y.max()
        low, high = np.flatnonzero(a < lo), np.flatnonzero(a > hi)
        a[low] = lo
        a[high] = hi
        record = (low, high, np.flatnonzero(Y == lo), np.flatnonzero(Y == hi))
    return a, out[1:], record


def conditional_expectation(
    features: np.ndarray,
    targets: np.ndarray,
    cfg: RegressionConfig,
    step: int = 0,
) -> tuple[np.ndarray, float, float]:
    """Least-squares projection of ``targets`` (n, p) on the piecewise polynomial basis.

    Returns fitted values, the worst cell condition number of the normal
    matrix, and the RMS residual of the first target column.  Cell
    intercepts are not penalised, so the cross-path mean of each fitted
    column equals that of its target (before clipping).
    """
    fit = _fit_step(np.asarray(features, dtype=np.float64), cfg, step)
    rows = np.ascontiguousarray(np.asarray(targets, dtype=np.float64).T)
    fitted = _project(fit, rows, cfg, clip=cfg.clip_to_range).T
    resid = float(np.sqrt(np.mean((targets[:, 0] - fitted[:, 0]) ** 2)))
    return fitted, fit.condition, resid


def _scaled_noise(paths: PathBundle, k: int) -> np.ndarray:
    """Hermite rows of ``w = dW_k / sqrt(dt)``: ``w_i`` then ``w_i w_j - delta_ij`` (unit scale)."""
    w = paths.increments[:, k, :].T / np.sqrt(paths.grid.dt)
    d = w.shape[0]
    rows = [w]
    for i in range(d):
        for j in range(i, d):
            rows.append(((w[i] * w[j] - 1.0) / np.sqrt(2.0))[None, :] if i == j else (w[i] * w[j])[None, :])
    return np.concatenate(rows, axis=0)


class RegressionPlan:
    """Per-step cells, standardised features and normal matrices for one state.

    Building the plan is the expensive part of a backward pass; solves that
    share a regression state and path bundle (multiplier searches in a fixed
    adjoint, variational equations) reuse it.  A ``template`` plan on the
    same paths donates its cell partition, which keeps successive Picard
    iterates on a common partition.
    """

    def __init__(
        self, state: np.ndarray, cfg: RegressionConfig, paths: PathBundle, template: "RegressionPlan | None" = None
    ):
        self.state = state
        self.cfg = cfg
        self.increments = paths.increments
        N = state.shape[1] - 1
        if template is not None and not (template.increments is paths.increments and template.cfg == cfg):
            template = None
        self.steps = [_fit_step(state[:, 0, :] * 0.0, cfg, 0, _scaled_noise(paths, 0))]
        for k in range(1, N):
            cells = template.steps[k] if template is not None else None
            self.steps.append(_fit_step(state[:, k, :], cfg, k, _scaled_noise(paths, k), cells))

    def matches(self, state: np.ndarray, cfg: RegressionConfig, paths: PathBundle) -> bool:
        return (
            self.cfg == cfg
            and self.increments is paths.increments
            and (state is self.state or np.array_equal(state, self.state))
        )


def _backward(
    paths: PathBundle,
    xi: np.ndarray,
    plan: RegressionPlan,
    drift: Callable[[int, np.ndarray, np.ndarray], np.ndarray],
    clipping: list | None = None,
) -> BsdeSolution:
    grid = paths.grid
    cfg = plan.cfg
    N, n, d = grid.n_steps, paths.n_paths, paths.d
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (n,):
        raise InvalidArgumentError(f"terminal values have shape {xi.shape}, expected ({n},)")
    if not np.all(np.isfinite(xi)):
        raise NumericalBlowupError("terminal values are not finite")
    dt = grid.dt

    X = np.empty((N + 1, n))
    Z = np.empty((N, n, d))
    X[N] = xi
    conds = np.ones(N)
    resids = np.zeros(N)
    sq = np.sqrt(dt)
    record: list = [None] * N
    for k in range(N - 1, -1, -1):
        Y = X[k + 1]
        fit = plan.steps[k]
        given = None if clipping is None else clipping[k]
        if clipping is not None and given is None:
            given = (np.empty(0, dtype=np.intp),) * 4
        EY, b, record[k] = _martingale_project(fit, Y, _scaled_noise(paths, k), cfg, d, given)
        if k == 0:
            # trivial sigma-algebra: X0 is the plain mean
            EY = np.full(n, Y.mean())
        conds[k] = fit.condition
        resids[k] = float(np.sqrt(np.mean((Y - EY) ** 2)))
        Zk = b.T / sq
        Xk = EY
        for _ in range(cfg.picard_substeps):
            Xk = EY + drift(k, Xk, Zk) * dt
        if not (np.all(np.isfinite(Xk)) and np.all(np.isfinite(Zk))):
            raise NumericalBlowupError(f"non-finite wealth or loading at step {k}")
        X[k] = Xk
        Z[k] = Zk

    return BsdeSolution(
        X=np.ascontiguousarray(X.T),
        Z=np.ascontiguousarray(Z.transpose(1, 0, 2)),
        X0=float(X[0, 0]),
        times=grid.times,
        state=plan.state,
        diagnostics={"condition": conds, "residual_rms": resids},
        plan=plan,
        clipping=clipping if clipping is not None else record,
    )


def _check_state(state: np.ndarray, paths: PathBundle) -> None:
    n, N = paths.n_paths, paths.grid.n_steps
    if state.ndim != 3 or state.shape[:2] != (n, N + 1):
        raise InvalidArgumentError(f"state has shape {state.shape}, expected ({n}, {N + 1}, k)")


def get_plan(
    state: np.ndarray,
    cfg: RegressionConfig,
    paths: PathBundle,
    plan: RegressionPlan | None = None,
    template: RegressionPlan | None = None,
) -> RegressionPlan:
    """Return ``plan`` if it was built for ``(state, cfg, paths)``, otherwise build a new one."""
    if plan is not None and plan.matches(state, cfg, paths):
        return plan
    return RegressionPlan(state, cfg, paths, template)


def solve_bsde(
    dr: WealthDriver,
    xi: np.ndarray,
    paths: PathBundle,
    state: np.ndarray,
    cfg: RegressionConfig | None = None,
    *,
    plan: RegressionPlan | None = None,
    template: RegressionPlan | None = None,
) -> BsdeSolution:
    """Solve ``-dX = f(X, Z, t)dt - Z'dW, X_T = xi`` backwards on ``paths``.

    Step k projects ``X_{k+1}`` on piecewise monomials of ``state[:, k]``
    (equal-count cells in the first feature).  The conditional mean comes
    from the polynomial block alone and is clipped to the sample range of
    ``X_{k+1}``; ``Z_k`` is the loading on ``dW_k / dt`` in a joint fit that
    also carries Hermite products of the scaled increment, which keeps the
    level of ``X_{k+1}`` out of the estimate.  The implicit drift term is
    resolved by ``cfg.picard_substeps`` fixed-point substitutions.  Step 0
    uses the plain cross-path mean, so ``X0`` is deterministic.  A ``plan``
    built for the same state and config skips the basis construction.
    """
    cfg = cfg or RegressionConfig()
    if dr.d != paths.d:
        raise InvalidArgumentError(f"driver dimension {dr.d} does not match paths dimension {paths.d}")
    _check_state(state, paths)
    times = paths.grid.times
    return _backward(paths, xi, get_plan(state, cfg, paths, plan, template), lambda k, x, z: dr.eval_fn(x, z, times[k]))


def _linearisation_t(dr: WealthDriver, base: BsdeSolution) -> tuple[np.ndarray, np.ndarray]:
    # time-major (N, n) and (N, n, d)
    Xt = np.ascontiguousarray(base.X[:, :-1].T)
    Zt = np.ascontiguousarray(base.Z.transpose(1, 0, 2))
    fx = np.empty(Xt.shape)
    fz = np.empty(Zt.shape)
    for k in range(Xt.shape[0]):
        fx[k], fz[k] = dr.grad_fn(Xt[k], Zt[k], base.times[k])
    return fx, fz


def linearisation(dr: WealthDriver, base: BsdeSolution) -> tuple[np.ndarray, np.ndarray]:
    """(f_X, f_Z) along ``base``, shapes (n, N) and (n, N, d)."""
    fx, fz = _linearisation_t(dr, base)
    return fx.T, fz.transpose(1, 0, 2)


def solve_variational(
    dr: WealthDriver,
    base: BsdeSolution,
    xi_hat: np.ndarray,
    paths: PathBundle,
    cfg: RegressionConfig | None = None,
) -> BsdeSolution:
    """First-order variation ``(dX, dZ)`` of the BSDE around ``base`` in direction ``xi_hat``.

    Solves the linear BSDE with generator ``f_X dX + f_Z' dZ`` (coefficients
    frozen along ``base``) on the regression state of ``base``.
    """
    if not dr.smooth:
        raise UnsupportedForNonsmoothError(
            f"variational equation needs a differentiable driver; {dr.name!r} is non-smooth"
        )
    cfg = cfg or RegressionConfig()
    fxt, fzt = _linearisation_t(dr, base)
    return _backward(
        paths,
        xi_hat,
        get_plan(base.state, cfg, paths, base.plan),
        lambda k, x, z: fxt[k] * x + np.einsum("nd,nd->n", fzt[k], z),
        base.clipping if base.clipping is not None else [None] * paths.grid.n_steps,
    )


class ProbeRow(NamedTuple):
    rho: float
    x_error: float
    z_error: float


def lemma32_convergence_probe(
    dr: WealthDriver,
    xi_star: np.ndarray,
    xi_hat: np.ndarray,
    paths: PathBundle,
    rhos,
    cfg: RegressionConfig | None = None,
    state: np.ndarray | None = None,
) -> list[ProbeRow]:
    """Error of the first-order expansion ``X^rho ~ X* + rho dX`` for each rho.

    ``x_error = max_t mean|(X^rho - X*)/rho - dX|^2`` and
    ``z_error = sum_t mean|(Z^rho - Z*)/rho - dZ|^2 dt``.  Without an explicit
    ``state`` the adjoint of the driver's linear part is used.  The default
    ``cfg`` turns range clipping off: clipping is not differentiable where a
    fitted mean meets the sample range, and those switches would mask the
    decay of the expansion error.
    """
    if not dr.smooth:
        raise UnsupportedForNonsmoothError("the expansion probe needs a differentiable driver")
    rhos = [float(r) for r in rhos]
    if any(not 0 < r <= 1 for r in rhos) or any(a <= b for a, b in zip(rhos, rhos[1:])):
        raise InvalidArgumentError("rhos must be decreasing values in (0, 1]")
    cfg = cfg or RegressionConfig(clip_to_range=False)
    if state is None:
        from .fbsde import initial_adjoint

        state = make_state(initial_adjoint(dr, paths).q)
    xi_star = np.asarray(xi_star, dtype=np.float64)
    xi_hat = np.asarray(xi_hat, dtype=np.float64)
    base = solve_bsde(dr, xi_star, paths, state, cfg)
    var = solve_variational(dr, base, xi_hat, paths, cfg)
    dt = paths.grid.dt
    rows = []
    for rho in rhos:
        pert = solve_bsde(dr, xi_star + rho * xi_hat, paths, state, cfg, plan=base.plan)
        xt = (pert.X - base.X) / rho - var.X
        zt = (pert.Z - base.Z) / rho - var.Z
        x_err = float(np.max(np.mean(xt**2, axis=0)))
        z_err = float(np.sum(np.mean(np.sum(zt**2, axis=2), axis=0)) * dt)
        rows.append(ProbeRow(rho, x_err, z_err))
    return rows


def recover_portfolio(sol: BsdeSolution, sigma: Callable[[float], np.ndarray]) -> np.ndarray:
    """Portfolio ``pi_k = (sigma(t_k)')^{-1} Z_k``, shape (n, N, d)."""
    n, N, d = sol.Z.shape
    pi = np.empty_like(sol.Z)
    for k in range(N):
        t = float(sol.times[k])
        s = np.asarray(sigma(t), dtype=np.float64)
        s = s * np.eye(d) if s.ndim == 0 else np.atleast_2d(s)
        try:
            if np.linalg.cond(s) > MAX_CONDITION:
                raise np.linalg.LinAlgError
            inv = np.linalg.inv(s)
        except np.linalg.LinAlgError:
            raise InvalidModelError(f"volatility matrix singular at t={t}") from None
        pi[:, k, :] = sol.Z[:, k, :] @ inv
    return pi
