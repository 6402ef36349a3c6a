"""Closed-form solution of the constant-coefficient linear market.

In the linear market the adjoint is the state-price density
``q_T = exp(-rT - theta'W_T - |theta|^2 T / 2)``, a lognormal variable, and
both constraints on ``xi = (K - a q_T)^+ / 2`` reduce to lognormal partial
expectations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, optimize, special

from .errors import DegenerateInstanceError, InvalidArgumentError


@dataclass(frozen=True)
class LognormalLaw:
    """Law of ``exp(m + s N(0, 1))``."""

    m: float
    s: float

    def __post_init__(self):
        if self.s < 0:
            raise InvalidArgumentError("log standard deviation must be >= 0")

    @property
    def mean(self) -> float:
        return math.exp(self.m + 0.5 * self.s**2)


def linear_law(r: float, theta_norm: float, T: float) -> LognormalLaw:
    return LognormalLaw(-(r + 0.5 * theta_norm**2) * T, theta_norm * math.sqrt(T))


def law_from_coefficients(
    r: Callable[[float], float], theta: Callable[[float], np.ndarray], T: float
) -> LognormalLaw:
    """Law of ``q_T`` for deterministic time-varying ``r(t)``, ``theta(t)``."""
    int_r = integrate.quad(lambda t: float(r(t)), 0.0, T, epsabs=1e-13)[0]
    int_th2 = integrate.quad(lambda t: float(np.sum(np.square(theta(t)))), 0.0, T, epsabs=1e-13)[0]
    return LognormalLaw(-int_r - 0.5 * int_th2, math.sqrt(int_th2))


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@dataclass(frozen=True)
class PartialExpectations:
    first: float  # E[(K - a L)^+]
    second: float  # E[L (K - a L)^+]
    empty: bool = False


def partial_expectations(K: float, a: float, law: LognormalLaw) -> PartialExpectations:
    """``E[(K - aL)^+]`` and ``E[L (K - aL)^+]`` for lognormal ``L``."""
    if a <= 0:
        raise InvalidArgumentError("a must be positive")
    if K <= 0:
        return PartialExpectations(0.0, 0.0, empty=True)
    m, s = law.m, law.s
    if s == 0.0:
        L = math.exp(m)
        pos = max(K - a * L, 0.0)
        return PartialExpectations(pos, L * pos)
    d = (math.log(K / a) - m) / s
    e1 = math.exp(m + 0.5 * s * s)
    e2 = math.exp(2.0 * m + 2.0 * s * s)
    if d >= 0.0:
        first = K * normal_cdf(d) - a * e1 * normal_cdf(d - s)
    else:
        first = 0.5 * K * _tail_difference(d, s)
    if d - s >= 0.0:
        second = K * e1 * normal_cdf(d - s) - a * e2 * normal_cdf(d - 2.0 * s)
    else:
        second = 0.5 * K * e1 * _tail_difference(d - s, s)
    return PartialExpectations(first, second)


def _tail_difference(u: float, s: float) -> float:
    # lower tail of K Phi(u) - a e^{m + s^2/2} Phi(u - s), divided by K / 2; both
    # terms share the factor exp(-u^2/2) and erfcx keeps the difference accurate
    r = 1.0 / math.sqrt(2.0)
    return math.exp(-0.5 * u * u) * (special.erfcx(-u * r) - special.erfcx(-(u - s) * r))


def quadrature_expectation(g: Callable[[float], float], K: float, a: float, law: LognormalLaw) -> float:
    """``E[g(L); aL < K]`` by adaptive Gauss-Kronrod over the log variable."""
    if K <= 0:
        return 0.0
    if law.s == 0.0:
        L = math.exp(law.m)
        return g(L) if a * L < K else 0.0
    upper = (math.log(K / a) - law.m) / law.s
    dens = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    lo = min(-40.0, upper - 1.0)
    val, _ = integrate.quad(
        lambda z: g(math.exp(law.m + law.s * z)) * dens(z), lo, upper, epsabs=0.0, epsrel=1e-12, limit=200
    )
    return val


@dataclass(frozen=True)
class OracleSolution:
    lambda1: float
    lambda2: float
    variance: float
    X0: float
    mean: float


def oracle_solve_linear(r: float, theta_norm: float, T: float, c: float, y: float) -> OracleSolution:
    """Multipliers and minimal variance for the linear market.

    Solves ``E[xi] = c`` and ``E[q_T xi] = y`` for ``xi = (-l2 - l1 q_T)^+ / 2``
    by nested bracketed root finding; the variance second moment is computed
    by quadrature.
    """
    if theta_norm <= 0:
        raise InvalidArgumentError("theta_norm must be positive")
    if c <= 0 or y <= 0:
        raise InvalidArgumentError("c and y must be positive")
    x0_const = c * math.exp(-r * T)
    if y >= x0_const:
        raise DegenerateInstanceError(f"y={y} >= X0 of constant wealth {x0_const}; variance is 0")
    law = linear_law(r, theta_norm, T)

    def K_for(a: float) -> float:
        # mean constraint 0.5 E[(K - aL)^+] = c is increasing in K
        f = lambda K: 0.5 * partial_expectations(K, a, law).first - c
        hi = 2.0 * c + a * law.mean
        while f(hi) < 0:
            hi *= 2.0
        return optimize.brentq(f, 1e-300, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)

    def budget_gap(a: float) -> float:
        return 0.5 * partial_expectations(K_for(a), a, law).second - y

    lo, hi = 1e-12, 1.0
    while budget_gap(hi) > 0:
        hi *= 2.0
        if hi > 1e12:
            # feasible in principle (ess inf q_T = 0) but out of reach of the nested root find
            raise InvalidArgumentError(f"y={y} needs lambda1 > 1e12; too close to the infimal investment")
    a = optimize.brentq(budget_gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    K = K_for(a)
    pe = partial_expectations(K, a, law)
    second_moment = 0.25 * quadrature_expectation(lambda L: (K - a * L) ** 2, K, a, law)
    return OracleSolution(
        lambda1=a,
        lambda2=-K,
        variance=second_moment - c * c,
        X0=float(0.5 * pe.second),
        mean=float(0.5 * pe.first),
    )
