"""Lagrange multipliers and the positive-part terminal wealth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class Multipliers:
    lambda1: float
    lambda2: float

    def __post_init__(self):
        if not (np.isfinite(self.lambda1) and self.lambda1 > 0):
            raise InvalidArgumentError(f"lambda1 must be positive, got {self.lambda1}")
        if not np.isfinite(self.lambda2):
            raise InvalidArgumentError(f"lambda2 must be finite, got {self.lambda2}")


def kkt_argument(lam: Multipliers, qT: np.ndarray) -> np.ndarray:
    """``-lambda2 - lambda1 * q_T``, evaluated in one fixed order.

    Both :func:`terminal_wealth` and the KKT check go through this function,
    which makes the complementarity identity hold bit for bit.
    """
    return (-lam.lambda2) - lam.lambda1 * np.asarray(qT, dtype=np.float64)


def terminal_wealth(lam: Multipliers, qT: np.ndarray) -> np.ndarray:
    """Optimal terminal wealth ``xi = (-lambda2 - lambda1 q_T)^+ / 2``."""
    return 0.5 * np.maximum(kkt_argument(lam, qT), 0.0)


def lambda2_for_mean(lambda1: float, qT: np.ndarray, c: float) -> float:
    """The unique ``lambda2`` with ``mean(terminal_wealth) = c`` at fixed ``lambda1``.

    ``K -> mean((K - lambda1 q)^+)`` is piecewise linear and non-decreasing
    with kinks at the sorted ``lambda1 q_i``, so the root is read off the
    segment that brackets ``2c``.
    """
    if c <= 0:
        raise InvalidArgumentError("target mean must be positive")
    v = np.sort(lambda1 * np.asarray(qT, dtype=np.float64))
    n = v.shape[0]
    target = 2.0 * c * n
    csum = np.cumsum(v)
    # n * g(v[j]) for j = 1..n-1
    g_at_kinks = np.arange(1, n) * v[1:] - csum[:-1]
    j = int(np.searchsorted(g_at_kinks, target)) + 1
    K = (target + csum[j - 1]) / j
    return -float(K)
