"""Time grids and seeded Brownian increment ensembles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _parallel
from .errors import InvalidArgumentError

# Paths are drawn in blocks of this many source indices; each block owns an
# independent stream keyed on (seed, block), so a path's increments depend
# only on (seed, path index, n_steps, d).
BLOCK_SIZE = 1024


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int
    times: np.ndarray

    @property
    def dt(self) -> float:
        return self.T / self.n_steps


def make_grid(T: float, n_steps: int) -> TimeGrid:
    """Uniform grid ``0 = t_0 < ... < t_N = T``."""
    if not np.isfinite(T) or T <= 0:
        raise InvalidArgumentError(f"horizon T must be positive, got {T}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise InvalidArgumentError(f"n_steps must be a positive integer, got {n_steps}")
    n_steps = int(n_steps)
    times = np.arange(n_steps + 1, dtype=np.float64) * (T / n_steps)
    times[-1] = T
    times.flags.writeable = False
    return TimeGrid(float(T), n_steps, times)


@dataclass(frozen=True)
class PathBundle:
    """Brownian increments of shape ``(n_paths, n_steps, d)``.

    Only increments are stored; levels are reconstructed with :meth:`levels`.
    """

    grid: TimeGrid
    d: int
    n_paths: int
    seed: int
    increments: np.ndarray
    antithetic: bool = False

    def levels(self) -> np.ndarray:
        """W at every grid time, shape ``(n_paths, n_steps + 1, d)``."""
        W = np.zeros((self.n_paths, self.grid.n_steps + 1, self.d))
        np.cumsum(self.increments, axis=1, out=W[:, 1:, :])
        return W

    def terminal(self) -> np.ndarray:
        """W_T, shape ``(n_paths, d)``."""
        return self.increments.sum(axis=1)


def _draw_block(seed: int, block: int, n_steps: int, d: int) -> np.ndarray:
    ss = np.random.SeedSequence(seed, spawn_key=(block,))
    rng = np.random.Generator(np.random.Philox(ss))
    return rng.standard_normal((BLOCK_SIZE, n_steps, d))


def simulate_paths(
    grid: TimeGrid, d: int, n_paths: int, seed: int, antithetic: bool = False
) -> PathBundle:
    """Draw Brownian increments ``N(0, dt I_d)`` for ``n_paths`` paths.

    With ``antithetic=True`` path ``2k+1`` is the negation of path ``2k``.
    Output is bit-identical for a given ``(seed, grid, d, n_paths, antithetic)``
    regardless of the configured worker count.
    """
    if d < 1 or int(d) != d:
        raise InvalidArgumentError(f"d must be a positive integer, got {d}")
    if n_paths < 2 or int(n_paths) != n_paths:
        raise InvalidArgumentError(f"n_paths must be an integer >= 2, got {n_paths}")
    if antithetic and n_paths % 2:
        raise InvalidArgumentError("antithetic sampling needs an even n_paths")
    if int(seed) != seed or not 0 <= seed < 2**64:
        raise InvalidArgumentError(f"seed must be a 64-bit non-negative integer, got {seed}")
    d, n_paths, seed = int(d), int(n_paths), int(seed)

    n_src = n_paths // 2 if antithetic else n_paths
    n_blocks = -(-n_src // BLOCK_SIZE)
    blocks = _parallel.ordered_map(lambda b: _draw_block(seed, b, grid.n_steps, d), n_blocks)
    normals = np.concatenate(blocks, axis=0)[:n_src]
    normals *= np.sqrt(grid.dt)

    if antithetic:
        inc = np.empty((n_paths, grid.n_steps, d))
        inc[0::2] = normals
        inc[1::2] = -normals
    else:
        inc = normals
    inc.flags.writeable = False
    return PathBundle(grid, d, n_paths, seed, inc, bool(antithetic))
