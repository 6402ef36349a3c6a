import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvdual import _parallel
from mvdual.errors import InvalidArgumentError
from mvdual.paths import make_grid, simulate_paths


def test_grid_examples():
    np.testing.assert_array_equal(make_grid(1.0, 4).times, [0, 0.25, 0.5, 0.75, 1])
    np.testing.assert_array_equal(make_grid(2.0, 1).times, [0, 2])
    with pytest.raises(InvalidArgumentError):
        make_grid(0.0, 10)
    with pytest.raises(InvalidArgumentError):
        make_grid(1.0, 0)


@given(T=st.floats(1e-3, 50.0), n=st.integers(1, 500))
def test_grid_endpoints_and_spacing(T, n):
    g = make_grid(T, n)
    assert g.times[0] == 0.0 and g.times[-1] == T
    assert np.allclose(np.diff(g.times), T / n, rtol=0, atol=4 * np.finfo(float).eps * T)


def test_same_seed_identical():
    g = make_grid(1.0, 20)
    a = simulate_paths(g, 2, 3000, 42)
    b = simulate_paths(g, 2, 3000, 42)
    np.testing.assert_array_equal(a.increments, b.increments)
    c = simulate_paths(g, 2, 3000, 43)
    assert not np.array_equal(a.increments, c.increments)


def test_independent_of_threads():
    g = make_grid(1.0, 10)
    a = simulate_paths(g, 1, 5000, 3, True)
    _parallel.set_threads(4)
    b = simulate_paths(g, 1, 5000, 3, True)
    np.testing.assert_array_equal(a.increments, b.increments)


def test_prefix_is_stable():
    # a longer run starts with the paths of a shorter one
    g = make_grid(1.0, 5)
    a = simulate_paths(g, 1, 1500, 9)
    b = simulate_paths(g, 1, 4000, 9)
    np.testing.assert_array_equal(a.increments, b.increments[:1500])


def test_increment_variance_and_mean():
    g = make_grid(1.0, 100)
    p = simulate_paths(g, 1, 100_000, 7)
    var = p.increments[:, :, 0].var(axis=0)
    assert np.all(np.abs(var / g.dt - 1) < 0.05)
    se = np.sqrt(g.dt / p.n_paths)
    assert np.all(np.abs(p.increments[:, :, 0].mean(axis=0)) < 5 * se)
    # skewness of the standardised increments
    u = p.increments[:, :, 0] / np.sqrt(g.dt)
    skew = np.mean(u**3, axis=0)
    assert np.all(np.abs(skew) < 5 * np.sqrt(6 / p.n_paths))


def test_antithetic_pairs():
    p = simulate_paths(make_grid(1.0, 8), 2, 1000, 1, True)
    np.testing.assert_array_equal(p.increments[1::2], -p.increments[0::2])
    assert np.all(p.terminal().sum(axis=0) == 0.0)
    with pytest.raises(InvalidArgumentError):
        simulate_paths(make_grid(1.0, 8), 1, 1001, 1, True)


def test_levels_are_prefix_sums():
    p = simulate_paths(make_grid(1.0, 6), 1, 10, 0)
    W = p.levels()
    assert W.shape == (10, 7, 1)
    np.testing.assert_array_equal(W[:, 0], 0.0)
    np.testing.assert_allclose(W[:, -1], p.terminal(), atol=1e-15)
    assert not p.increments.flags.writeable


@settings(max_examples=25, deadline=None)
@given(n_half=st.integers(1, 600), steps=st.integers(1, 12), d=st.integers(1, 3), seed=st.integers(0, 2**63))
def test_antithetic_property(n_half, steps, d, seed):
    p = simulate_paths(make_grid(1.0, steps), d, 2 * n_half, seed, True)
    assert p.increments.shape == (2 * n_half, steps, d)
    assert np.all(p.increments[0::2] + p.increments[1::2] == 0.0)


@pytest.mark.parametrize("bad", [dict(d=0), dict(n_paths=1), dict(seed=-1)])
def test_invalid_arguments(bad):
    kw = dict(d=1, n_paths=10, seed=0)
    kw.update(bad)
    with pytest.raises(InvalidArgumentError):
        simulate_paths(make_grid(1.0, 2), **kw)
