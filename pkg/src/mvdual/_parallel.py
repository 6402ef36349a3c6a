"""Thread fan-out over fixed-size path chunks.

Work is split into chunks whose boundaries depend only on the problem size,
and partial results are combined in chunk order, so the output does not
depend on how many workers run.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")

_threads = 1


def set_threads(n: int) -> None:
    global _threads
    if n < 1:
        raise ValueError("threads must be >= 1")
    _threads = int(n)


def get_threads() -> int:
    return _threads


def ordered_map(fn: Callable[[int], T], n_tasks: int) -> list[T]:
    """Evaluate ``fn(0), ..., fn(n_tasks - 1)`` and return results in index order."""
    if _threads == 1 or n_tasks <= 1:
        return [fn(i) for i in range(n_tasks)]
    with ThreadPoolExecutor(max_workers=min(_threads, n_tasks)) as pool:
        return list(pool.map(fn, range(n_tasks)))


def chunk_bounds(n: int, chunk: int) -> Sequence[tuple[int, int]]:
    return [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
