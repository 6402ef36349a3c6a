import pytest

from mvdual import _parallel
from mvdual.drivers import LinearParams
from mvdual.paths import make_grid, simulate_paths


@pytest.fixture(autouse=True)
def _single_thread():
    _parallel.set_threads(1)
    yield
    _parallel.set_threads(1)


@pytest.fixture(scope="session")
def golden_params():
    return LinearParams(0.0, 0.2, 1.0, 1.0)


@pytest.fixture(scope="session")
def small_paths():
    """10^4 antithetic paths on a 50-step unit grid."""
    return simulate_paths(make_grid(1.0, 50), 1, 10_000, 0, True)


def rel(a, b):
    return abs(a - b) / abs(b)


def assert_close_rel(a, b, tol):
    assert rel(a, b) <= tol, f"{a} vs {b}: relative error {rel(a, b):.3e} > {tol}"

