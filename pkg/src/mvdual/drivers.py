"""Wealth-equation generators ``f(X, Z, t)`` with first-order information.

Sign convention: wealth solves ``-dX = f(X, Z, t) dt - Z' dW`` with
``Z = sigma(t)' pi``.  All drivers are vectorised over paths: ``x`` has shape
``(n,)`` and ``z`` shape ``(n, d)``; a single point may be passed as a scalar
``x`` and a length-``d`` vector ``z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidArgumentError, InvalidModelError
from .paths import TimeGrid

KINK_TOL = 1e-12

# sup of d/du [u tanh u]; attained near u = 1.2
_UTANH_SLOPE = 1.2


def _as_fn(value) -> Callable[[float], np.ndarray]:
    if callable(value):
        return value
    arr = np.asarray(value, dtype=np.float64)
    return lambda t, _a=arr: _a


@dataclass(frozen=True)
class LinearParams:
    """Coefficients of the standard linear market.

    ``r``, ``theta`` and ``sigma`` are constants or callables of time.  A scalar
    ``sigma`` means ``sigma * I_d``.  ``horizon`` only bounds the interval on
    which time-dependent coefficients are sampled for validation.
    """

    r: float | Callable[[float], float] = 0.0
    theta: float | np.ndarray | Callable[[float], np.ndarray] = 0.0
    sigma: float | np.ndarray | Callable[[float], np.ndarray] = 1.0
    horizon: float = 1.0
    _r: Callable = field(init=False, repr=False, compare=False)
    _theta: Callable = field(init=False, repr=False, compare=False)
    _sigma: Callable = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_r", _as_fn(self.r))
        object.__setattr__(self, "_theta", _as_fn(self.theta))
        object.__setattr__(self, "_sigma", _as_fn(self.sigma))
        for t in self.sample_times():
            r = self.r_at(t)
            if not np.isfinite(r) or r < 0:
                raise InvalidArgumentError(f"interest rate must be finite and >= 0, got r({t})={r}")
            if not np.all(np.isfinite(self.theta_at(t))):
                raise InvalidArgumentError(f"risk premium not finite at t={t}")
            self.sigma_inv_at(t)

    @property
    def d(self) -> int:
        return int(np.atleast_1d(self._theta(0.0)).shape[0])

    def sample_times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, 11)

    def r_at(self, t: float) -> float:
        return float(self._r(t))

    def theta_at(self, t: float) -> np.ndarray:
        return np.atleast_1d(np.asarray(self._theta(t), dtype=np.float64))

    def sigma_at(self, t: float) -> np.ndarray:
        s = np.asarray(self._sigma(t), dtype=np.float64)
        if s.ndim == 0:
            return s * np.eye(self.d)
        return np.atleast_2d(s)

    def sigma_inv_at(self, t: float) -> np.ndarray:
        s = self.sigma_at(t)
        if s.shape != (self.d, self.d):
            raise InvalidModelError(f"sigma({t}) has shape {s.shape}, expected {(self.d, self.d)}")
        if not np.all(np.isfinite(s)) or np.linalg.cond(s) > 1e12:
            raise InvalidModelError(f"volatility matrix is singular at t={t}")
        return np.linalg.inv(s)

    def sup_r(self) -> float:
        return max(self.r_at(t) for t in self.sample_times())

    def sup_theta(self) -> float:
        return max(float(np.linalg.norm(self.theta_at(t))) for t in self.sample_times())

    def sup_sigma_inv(self) -> float:
        return max(float(np.linalg.norm(self.sigma_inv_at(t), 2)) for t in self.sample_times())


def _batch(x, z, d):
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    single = x.ndim == 0
    x = np.atleast_1d(x)
    if z.ndim == 1 and single:
        z = z.reshape(1, -1)
    elif z.ndim == 1:
        z = z.reshape(-1, 1)
    if z.shape[1] != d:
        raise InvalidArgumentError(f"z has {z.shape[1]} columns, driver dimension is {d}")
    return x, z, single


@dataclass(frozen=True)
class WealthDriver:
    """A generator ``f(x, z, t)`` together with its (sub)gradient.

    ``kink`` (non-smooth drivers only) maps ``(x, z, t)`` to the argument whose
    sign switches the active branch; it drives derivative checks.
    ``base`` is the linear driver with the same coefficients, used to warm
    start coupled solves.
    """

    name: str
    d: int
    eval_fn: Callable
    grad_fn: Callable
    lipschitz_bound: float
    smooth: bool
    volatility: Callable[[float], np.ndarray]
    params: LinearParams | None = None
    kink: Callable | None = None
    base: "WealthDriver | None" = None
    warnings: tuple[str, ...] = ()

    def eval(self, x, z, t: float):
        xb, zb, single = _batch(x, z, self.d)
        out = self.eval_fn(xb, zb, float(t))
        return float(out[0]) if single else out

    def grad(self, x, z, t: float):
        """Return ``(f_X, f_Z)``; an element of the subdifferential at kinks."""
        xb, zb, single = _batch(x, z, self.d)
        fx, fz = self.grad_fn(xb, zb, float(t))
        if single:
            return float(fx[0]), fz[0]
        return fx, fz

    @property
    def linear_part(self) -> "WealthDriver | None":
        if self.base is not None:
            return self.base
        return self if self.name == "linear" else None


def linear_driver(p: LinearParams) -> WealthDriver:
    """``f = -r x - theta' z``."""

    def f(x, z, t):
        return -p.r_at(t) * x - z @ p.theta_at(t)

    def g(x, z, t):
        n = x.shape[0]
        return np.full(n, -p.r_at(t)), np.broadcast_to(-p.theta_at(t), (n, p.d)).copy()

    return WealthDriver(
        name="linear",
        d=p.d,
        eval_fn=f,
        grad_fn=g,
        lipschitz_bound=p.sup_r() + p.sup_theta(),
        smooth=True,
        volatility=p.sigma_at,
        params=p,
    )


def zero_driver(d: int = 1) -> WealthDriver:
    return linear_driver(LinearParams(0.0, np.zeros(d), 1.0))


# --- large investor -------------------------------------------------------


@dataclass(frozen=True)
class ScalarImpact:
    """Bank-rate impact ``l0(x, pi)`` and its gradient ``(d/dx, d/dpi)``."""

    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
    name: str = "custom"
    # Lipschitz constant in pi of the induced term (x - 1'pi) l0; inf if unbounded
    lipschitz: float = np.inf


@dataclass(frozen=True)
class VectorImpact:
    """Stock-drift impact ``l(x, pi)`` and its Jacobian.

    ``jac`` returns ``(dl/dx, dl/dpi)`` with shapes ``(n, d)`` and
    ``(n, d, d)``, where ``[..., i, j] = d l_i / d pi_j``.
    """

    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
    name: str = "custom"
    # Lipschitz constant in pi of the induced term pi' l
    lipschitz: float = np.inf


def no_rate_impact() -> ScalarImpact:
    return ScalarImpact(
        value=lambda x, pi: np.zeros_like(x),
        grad=lambda x, pi: (np.zeros_like(x), np.zeros_like(pi)),
        name="none",
        lipschitz=0.0,
    )


def no_drift_impact() -> VectorImpact:
    return VectorImpact(
        value=lambda x, pi: np.zeros_like(pi),
        jac=lambda x, pi: (np.zeros_like(pi), np.zeros(pi.shape + (pi.shape[1],))),
        name="none",
        lipschitz=0.0,
    )


def tanh_rate_impact(eps: float = 0.01) -> ScalarImpact:
    """``l0 = eps * tanh(1' pi)``.  Not jointly convex in (x, z); see ``large_investor_driver``."""

    def value(x, pi):
        return eps * np.tanh(pi.sum(axis=1))

    def grad(x, pi):
        s = pi.sum(axis=1)
        dpi = (eps / np.cosh(s) ** 2)[:, None] * np.ones_like(pi)
        return np.zeros_like(x), dpi

    return ScalarImpact(value, grad, name=f"tanh_rate(eps={eps})")


def tanh_price_impact(eps: float = 0.01, d_hint: int = 1) -> VectorImpact:
    """``l_i = -eps * tanh(1' pi / sqrt(d))``: holding the market depresses its drift.

    The induced generator term ``eps * sqrt(d) * u tanh(u)`` with
    ``u = 1' pi / sqrt(d)`` is convex for ``|u| <= 1.19``, which covers the
    unit ball in ``pi``.  ``d_hint`` only enters the advertised Lipschitz bound.
    """

    def value(x, pi):
        d = pi.shape[1]
        u = pi.sum(axis=1) / np.sqrt(d)
        return np.repeat((-eps * np.tanh(u))[:, None], d, axis=1)

    def jac(x, pi):
        n, d = pi.shape
        u = pi.sum(axis=1) / np.sqrt(d)
        dpi = np.broadcast_to((-eps / np.sqrt(d) / np.cosh(u) ** 2)[:, None, None], (n, d, d)).copy()
        return np.zeros_like(pi), dpi

    return VectorImpact(value, jac, name=f"tanh_price(eps={eps})", lipschitz=_UTANH_SLOPE * eps * np.sqrt(d_hint))


def _directional_convexity(f, x, z, t, rng, h=1e-3, tol=1e-10) -> np.ndarray:
    d = z.shape[1]
    v = rng.standard_normal((x.shape[0], d + 1))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    vx, vz = v[:, 0], v[:, 1:]
    f0 = f(x, z, t)
    fp = f(x + h * vx, z + h * vz, t)
    fm = f(x - h * vx, z - h * vz, t)
    second = (fp - 2.0 * f0 + fm) / h**2
    return second >= -tol * (1.0 + np.abs(f0)) / h**2


def _probe_points(rng, n, p_sigma_at, t, d):
    """x uniform on [0, 2], pi uniform in the unit ball, z = sigma' pi."""
    x = rng.uniform(0.0, 2.0, n)
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    pi = g * rng.uniform(0.0, 1.0, (n, 1)) ** (1.0 / d)
    z = pi @ p_sigma_at(t)  # row form of sigma' pi
    return x, z


def large_investor_driver(
    p: LinearParams,
    l0: ScalarImpact | None = None,
    l: VectorImpact | None = None,
    *,
    convexity_probes: int = 2000,
) -> WealthDriver:
    """Generator of a large investor whose trades move rates and drifts.

    ``f = -r x - (x - 1'pi) l0(x, pi) - pi'[b - r 1 + l(x, pi)]`` with
    ``pi = (sigma')^{-1} z`` and ``b - r 1 = sigma theta``.  With both impacts
    omitted the default is ``l0 = 0`` and :func:`tanh_price_impact`.

    Convexity in ``(x, z)`` is spot-checked on ``x in [0, 2]``, ``|pi| <= 1``;
    a failure is recorded in ``warnings`` rather than raised.
    """
    if l0 is None and l is None:
        l = tanh_price_impact(d_hint=p.d)
    l0 = l0 or no_rate_impact()
    l = l or no_drift_impact()
    d = p.d

    def to_pi(z, t):
        return z @ p.sigma_inv_at(t)  # row form of (sigma')^{-1} z

    def f(x, z, t):
        pi = to_pi(z, t)
        s = pi.sum(axis=1)
        return (
            -p.r_at(t) * x
            - z @ p.theta_at(t)
            - (x - s) * l0.value(x, pi)
            - np.einsum("ni,ni->n", pi, l.value(x, pi))
        )

    def grad(x, z, t):
        pi = to_pi(z, t)
        s = pi.sum(axis=1)
        l0v = l0.value(x, pi)
        l0x, l0p = l0.grad(x, pi)
        lv = l.value(x, pi)
        lx, lp = l.jac(x, pi)
        dg_dx = l0v + (x - s) * l0x + np.einsum("ni,ni->n", pi, lx)
        dg_dpi = -l0v[:, None] + (x - s)[:, None] * l0p + lv + np.einsum("ni,nij->nj", pi, lp)
        fx = -p.r_at(t) - dg_dx
        fz = -p.theta_at(t) - dg_dpi @ p.sigma_inv_at(t).T
        return fx, fz

    impact_lip = (l0.lipschitz + l.lipschitz) * p.sup_sigma_inv()

    rng = np.random.default_rng(20071)
    ok = []
    for t in p.sample_times()[[0, -1]]:
        x, z = _probe_points(rng, convexity_probes // 2, p.sigma_at, t, d)
        ok.append(_directional_convexity(f, x, z, t, rng))
    ok = np.concatenate(ok)
    warnings = ()
    if not ok.all():
        warnings = (
            f"generator not convex: {np.count_nonzero(~ok)} of {ok.size} directional "
            "second differences negative on x in [0,2], |pi| <= 1",
        )

    return WealthDriver(
        name="large_investor",
        d=d,
        eval_fn=f,
        grad_fn=grad,
        lipschitz_bound=p.sup_r() + p.sup_theta() + impact_lip,
        smooth=True,
        volatility=p.sigma_at,
        params=p,
        base=linear_driver(p),
        warnings=warnings,
    )


# --- non-smooth drivers ---------------------------------------------------


def tax_driver(p: LinearParams, alpha: float) -> WealthDriver:
    """Gains tax: ``f = -r x - theta'z + alpha (theta'z)^+``.

    At the kink ``theta'z = 0`` the right derivative is selected.
    """
    if not 0.0 <= alpha < 1.0:
        raise InvalidArgumentError(f"tax rate alpha must lie in [0, 1), got {alpha}")

    def gain(z, t):
        return z @ p.theta_at(t)

    def f(x, z, t):
        g = gain(z, t)
        return -p.r_at(t) * x - g + alpha * np.maximum(g, 0.0)

    def grad(x, z, t):
        g = gain(z, t)
        taxed = (g > 0.0) | (np.abs(g) < KINK_TOL)
        th = p.theta_at(t)
        fz = -th[None, :] + (alpha * taxed)[:, None] * th[None, :]
        return np.full(x.shape[0], -p.r_at(t)), fz

    return WealthDriver(
        name="tax",
        d=p.d,
        eval_fn=f,
        grad_fn=grad,
        lipschitz_bound=p.sup_r() + p.sup_theta(),
        smooth=False,
        volatility=p.sigma_at,
        params=p,
        kink=lambda x, z, t: gain(z, t),
        base=linear_driver(p),
    )


def borrow_driver(
    p: LinearParams, R: float | Callable[[float], float], times: np.ndarray | None = None
) -> WealthDriver:
    """Borrowing at ``R(t) >= r(t)``: ``f = -r x - theta'z + (R - r)(x - 1'pi)^-``.

    At ``x = 1'pi`` the no-borrowing branch (coefficient 0) is selected.
    """
    R_fn = _as_fn(R)
    check = p.sample_times() if times is None else np.asarray(times)
    for t in check:
        if float(R_fn(t)) < p.r_at(t):
            raise InvalidArgumentError(f"borrowing rate R({t})={float(R_fn(t))} below r({t})={p.r_at(t)}")

    def cash(x, z, t):
        return x - (z @ p.sigma_inv_at(t)).sum(axis=1)

    def f(x, z, t):
        spread = float(R_fn(t)) - p.r_at(t)
        return -p.r_at(t) * x - z @ p.theta_at(t) + spread * np.maximum(-cash(x, z, t), 0.0)

    def grad(x, z, t):
        spread = float(R_fn(t)) - p.r_at(t)
        u = cash(x, z, t)
        borrowing = (u < 0.0) & (np.abs(u) >= KINK_TOL)
        fx = -p.r_at(t) - spread * borrowing
        ones_dir = p.sigma_inv_at(t) @ np.ones(p.d)
        fz = -p.theta_at(t)[None, :] + (spread * borrowing)[:, None] * ones_dir[None, :]
        return fx, fz

    sup_spread = max(float(R_fn(t)) - p.r_at(t) for t in p.sample_times())
    return WealthDriver(
        name="borrow",
        d=p.d,
        eval_fn=f,
        grad_fn=grad,
        lipschitz_bound=p.sup_r() + p.sup_theta() + sup_spread * (1.0 + np.sqrt(p.d) * p.sup_sigma_inv()),
        smooth=False,
        volatility=p.sigma_at,
        params=p,
        kink=cash,
        base=linear_driver(p),
    )


# --- validation -----------------------------------------------------------


@dataclass
class ValidationReport:
    zero_drift_nonneg: bool
    zero_drift_min: float
    zero_drift_finite: bool
    empirical_lipschitz: float
    lipschitz_bound: float
    lipschitz_pass: bool
    grad_max_rel_error: float
    grad_checked: int
    grad_skipped: int
    convexity_pass_rate: float
    smooth: bool

    @property
    def passed(self) -> bool:
        return (
            self.zero_drift_nonneg
            and self.zero_drift_finite
            and self.lipschitz_pass
            and self.grad_max_rel_error < 1e-4
            and self.convexity_pass_rate == 1.0
        )


def validate_driver(dr: WealthDriver, grid: TimeGrid, n_probe: int = 1000, seed: int = 0) -> ValidationReport:
    """Empirically check ``dr`` on ``grid``; never raises.

    Covers the Lipschitz bound, finiteness and sign of ``f(0, 0, t)``, and
    convexity along random directions.
    """
    rng = np.random.default_rng(seed)
    d = dr.d
    zero_vals = np.array([dr.eval(0.0, np.zeros(d), t) for t in grid.times])
    finite = bool(np.all(np.isfinite(zero_vals)))
    nonneg = bool(np.all(zero_vals >= 0.0))

    t_idx = rng.integers(0, grid.n_steps + 1, n_probe)
    lip = 0.0
    max_rel = 0.0
    checked = skipped = 0
    conv_ok = []
    h = 1e-6
    for t in np.unique(grid.times[t_idx]):
        m = int(np.count_nonzero(grid.times[t_idx] == t))
        x1, z1 = _probe_points(rng, m, dr.volatility, t, d)
        x2, z2 = _probe_points(rng, m, dr.volatility, t, d)
        num = np.abs(dr.eval_fn(x1, z1, t) - dr.eval_fn(x2, z2, t))
        den = np.abs(x1 - x2) + np.linalg.norm(z1 - z2, axis=1)
        lip = max(lip, float(np.max(num / np.maximum(den, 1e-300))))

        fx, fz = dr.grad_fn(x1, z1, t)
        mask = np.ones(m, dtype=bool)
        if dr.kink is not None:
            mask = np.abs(dr.kink(x1, z1, t)) > 1e4 * h
        skipped += int(np.count_nonzero(~mask))
        if mask.any():
            xs, zs = x1[mask], z1[mask]
            fd_x = (dr.eval_fn(xs + h, zs, t) - dr.eval_fn(xs - h, zs, t)) / (2 * h)
            fd_z = np.empty_like(zs)
            for j in range(d):
                e = np.zeros(d)
                e[j] = h
                fd_z[:, j] = (dr.eval_fn(xs, zs + e, t) - dr.eval_fn(xs, zs - e, t)) / (2 * h)
            g = np.column_stack([fx[mask], fz[mask]])
            gfd = np.column_stack([fd_x, fd_z])
            rel = np.max(np.abs(g - gfd), axis=1) / np.maximum(np.max(np.abs(g), axis=1), 1e-8)
            # a vanishing gradient is compared in absolute terms
            rel = np.where(np.max(np.abs(g), axis=1) < 1e-8, np.max(np.abs(g - gfd), axis=1), rel)
            max_rel = max(max_rel, float(np.max(rel)))
            checked += int(mask.sum())
        conv_ok.append(_directional_convexity(dr.eval_fn, x1, z1, t, rng))

    conv = np.concatenate(conv_ok)
    return ValidationReport(
        zero_drift_nonneg=nonneg,
        zero_drift_min=float(np.min(zero_vals)),
        zero_drift_finite=finite,
        empirical_lipschitz=lip,
        lipschitz_bound=dr.lipschitz_bound,
        lipschitz_pass=bool(lip <= dr.lipschitz_bound * (1 + 1e-9) + 1e-12),
        grad_max_rel_error=max_rel,
        grad_checked=checked,
        grad_skipped=skipped,
        convexity_pass_rate=float(np.mean(conv)),
        smooth=dr.smooth,
    )
