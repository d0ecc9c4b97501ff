import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal_hj.dynamics import DoubleIntegrator
from conformal_hj.exceptions import ConfigurationError, ContractError, ConvergenceError
from conformal_hj.oracle import (GridValueIteration, StateGrid, bellman_backup, greedy_policy,
                                 iteration_bound, successor_operator, value_iteration)


@pytest.fixture
def line():
    return StateGrid([-1.0], [1.0], 21)


def test_backup_gamma_zero_returns_h(di):
    g = StateGrid([-1.5, -2], [1.5, 2], 11)
    v = np.random.default_rng(0).normal(size=g.size)
    np.testing.assert_allclose(bellman_backup(di, g, v, 0.0), di.margin(g.points()))


def test_backup_constant_fixed_point():
    class Flat(DoubleIntegrator):
        def margin(self, x):
            return np.full(np.asarray(x).shape[:-1], 0.7)
    g = StateGrid([-1.5, -2], [1.5, 2], 9)
    np.testing.assert_allclose(bellman_backup(Flat(), g, np.full(g.size, 0.7), 0.9), 0.7)


def test_backup_frozen_identity(frozen, line):
    h = frozen.margin(line.points())
    np.testing.assert_allclose(bellman_backup(frozen, line, h, 0.5), h)


def test_backup_shape_check(frozen, line):
    with pytest.raises(ContractError):
        bellman_backup(frozen, line, np.zeros(3), 0.5)


def test_value_iteration_frozen_converges_quickly(frozen, line):
    gvf, n_iter, residual = value_iteration(frozen, line, gamma=0.5, tol=1e-9)
    assert n_iter <= 35 and residual < 1e-9


def test_double_integrator_oracle(di):
    gvi = GridValueIteration(di, nodes=101, gamma=0.999, tol=1e-6).fit()
    v = gvi.value_function_.values
    h = di.margin(gvi.grid_.points())
    assert gvi.residual_ < 1e-6
    assert np.all(v <= h + 1e-12)
    assert h.min() - 1e-12 <= v.min() and v.max() <= h.max() + 1e-12
    # one extra backup leaves the fixed point in place
    assert np.max(np.abs(bellman_backup(di, gvi.grid_, v, 0.999) - v)) < 1e-6
    first = np.max(np.abs(bellman_backup(di, gvi.grid_, h, 0.999) - h))
    assert gvi.n_iter_ <= iteration_bound(1e-6, first, 0.999)
    assert gvi.predict([[0.0, 0.0]])[0] > 0 and gvi.predict([[0.1, -0.1]])[0] > 0
    assert np.all(gvi.predict([[1.2, 0.0], [-1.3, 0.5]]) < 0)
    np.testing.assert_array_equal(gvi.policy(np.array([0.5, 0.5])), [-1.0])


def test_iteration_cap_raises(di):
    g = StateGrid([-1.5, -2], [1.5, 2], 11)
    with pytest.raises(ConvergenceError):
        value_iteration(di, g, gamma=0.999, tol=1e-9, max_iter=3)


def test_value_iteration_rejects_bad_gamma(frozen, line):
    with pytest.raises(ConfigurationError):
        value_iteration(frozen, line, gamma=1.0)


def test_interpolation_at_nodes_and_midpoint():
    g = StateGrid([0.0], [1.0], 2)
    assert g.interpolate(np.array([0.0, 1.0]), np.array([[0.5]]))[0] == pytest.approx(0.5)
    g2 = StateGrid([-1, -1], [1, 1], [5, 7])
    vals = np.random.default_rng(1).normal(size=g2.size)
    np.testing.assert_allclose(g2.interpolate(vals, g2.points()), vals, atol=1e-12)


def test_interpolation_clamps_to_hull():
    g = StateGrid([0.0], [1.0], 3)
    vals = np.array([2.0, 3.0, 5.0])
    np.testing.assert_allclose(g.interpolate(vals, np.array([[-4.0], [9.0]])), [2.0, 5.0])


def test_interpolation_reproduces_affine_functions():
    g = StateGrid([-1, 0, 2], [1, 3, 4], [4, 5, 3])
    f = lambda X: 1.5 * X[:, 0] - 2 * X[:, 1] + 0.25 * X[:, 2] + 3
    q = np.random.default_rng(2).uniform([-1, 0, 2], [1, 3, 4], size=(200, 3))
    np.testing.assert_allclose(g.interpolate(f(g.points()), q), f(q), atol=1e-12)


def test_row_major_enumeration():
    g = StateGrid([0, 0], [1, 2], [2, 3])
    np.testing.assert_array_equal(g.points()[:3], [[0, 0], [0, 1], [0, 2]])


def test_grid_validation():
    with pytest.raises(ConfigurationError):
        StateGrid([0.0], [0.0], 3)
    with pytest.raises(ConfigurationError):
        StateGrid([0.0], [1.0], 1)


def test_greedy_ties_go_to_first_control(frozen, line):
    gvf, _, _ = value_iteration(frozen, line, gamma=0.5, tol=1e-9)
    np.testing.assert_array_equal(greedy_policy(frozen, gvf, np.array([0.3])),
                                  frozen.control_grid()[0])


def test_sparse_operator_matches_direct_interpolation(di):
    g = StateGrid([-1.5, -2], [1.5, 2], 13)
    op, k = successor_operator(di, g)
    v = np.random.default_rng(3).normal(size=g.size)
    nxt = di.dynamics(g.points()[:, None, :], di.control_grid()[None]).reshape(-1, 2)
    np.testing.assert_allclose(op @ v, g.interpolate(v, nxt), atol=1e-12)
    assert k == len(di.control_grid())


@pytest.fixture(scope="module")
def small_problem():
    sys = DoubleIntegrator()
    g = StateGrid([-1.5, -2], [1.5, 2], 9)
    return sys, g, successor_operator(sys, g)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.99))
def test_backup_is_a_contraction(small_problem, seed, gamma):
    sys, g, op = small_problem
    rng = np.random.default_rng(seed)
    v1, v2 = rng.normal(scale=3, size=(2, g.size))
    d = np.max(np.abs(bellman_backup(sys, g, v1, gamma, op) - bellman_backup(sys, g, v2, gamma, op)))
    assert d <= gamma * np.max(np.abs(v1 - v2)) + 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_backup_is_monotone(small_problem, seed):
    sys, g, op = small_problem
    rng = np.random.default_rng(seed)
    v1 = rng.normal(size=g.size)
    v2 = v1 + rng.uniform(0, 2, size=g.size)
    assert np.all(bellman_backup(sys, g, v1, 0.9, op) <= bellman_backup(sys, g, v2, 0.9, op) + 1e-12)
