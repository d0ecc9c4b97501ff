import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal_hj.dynamics import (DoubleIntegrator, DubinsCar, SystemModel, control_grid,
                                   failure_margin, greedy_control, make_control_grid, step,
                                   wrap_angle)
from conformal_hj.exceptions import ConfigurationError, ContractError, ControlClampWarning


def test_double_integrator_equilibrium(di):
    assert np.array_equal(step(di, [0.0, 0.0], [0.0]), [0.0, 0.0])


def test_double_integrator_euler_step(di):
    np.testing.assert_allclose(step(di, [1.0, 2.0], [0.5]), [1.2, 2.05], atol=1e-15)


def test_dubins_euler_step():
    car = DubinsCar()
    np.testing.assert_allclose(step(car, [0.0, 0.0, 0.0], [0.0]), [0.1, 0.0, 0.0], atol=1e-15)


@pytest.mark.parametrize("p, expected", [(0.0, 1.0), (1.0, 0.0), (1.5, -0.5), (-1.5, -0.5)])
def test_double_integrator_margin(di, p, expected):
    assert failure_margin(di, [p, 0.3]) == pytest.approx(expected)


def test_control_grid_endpoints_and_midpoint():
    np.testing.assert_array_equal(make_control_grid([[-1, 1]], [3]).ravel(), [-1, 0, 1])


def test_control_grid_cartesian_product():
    g = make_control_grid([[-1, 1], [0, 2]], [2, 2])
    assert {tuple(r) for r in g} == {(-1, 0), (-1, 2), (1, 0), (1, 2)}
    assert len(g) == 4


def test_control_grid_degenerate_axis_collapses():
    np.testing.assert_array_equal(make_control_grid([[0, 0]], [2]), [[0.0]])


def test_control_grid_resolution_below_two():
    with pytest.raises(ConfigurationError):
        DoubleIntegrator(control_grid_resolution=1).control_grid()


def test_control_grid_within_bounds(highway):
    g = control_grid(highway)
    assert len(g) == 25
    assert np.all(g >= highway.control_bounds[:, 0]) and np.all(g <= highway.control_bounds[:, 1])


def test_dimension_mismatch_is_contract_error(di):
    with pytest.raises(ContractError):
        step(di, [0.0, 0.0, 0.0], [0.0])
    with pytest.raises(ContractError):
        step(di, [0.0, 0.0], [0.0, 1.0])
    with pytest.raises(ContractError):
        failure_margin(di, [np.nan, 0.0])


def test_out_of_bounds_control_clamped_with_warning(di):
    with pytest.warns(ControlClampWarning):
        x = step(di, [0.0, 0.0], [5.0])
    np.testing.assert_allclose(x, [0.0, 0.1])


def test_in_bounds_control_emits_no_warning(di):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        step(di, [0.0, 0.0], [1.0])


def test_step_does_not_mutate_inputs(di):
    x = np.array([0.3, -0.2])
    u = np.array([0.5])
    step(di, x, u)
    np.testing.assert_array_equal(x, [0.3, -0.2])
    np.testing.assert_array_equal(u, [0.5])


def test_invalid_system_configuration():
    with pytest.raises(ConfigurationError):
        DoubleIntegrator(dt=0.0)
    with pytest.raises(ConfigurationError):
        SystemModel(1, 1, [[1.0, -1.0]])


def test_double_integrator_superposition(di):
    rng = np.random.default_rng(0)
    x1, x2 = rng.normal(size=(2, 100, 2))
    u1, u2 = rng.normal(size=(2, 100, 1))
    zero = di.dynamics(np.zeros(2), np.zeros(1))
    lhs = di.dynamics(x1 + x2, u1 + u2) - di.dynamics(x1, u1) - di.dynamics(x2, u2) + zero
    assert np.max(np.abs(lhs)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.floats(-1, 1))
def test_step_is_deterministic(x, u):
    car = DubinsCar()
    a = step(car, x, [u])
    b = step(car, x, [u])
    assert a.tobytes() == b.tobytes()


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e4, 1e4))
def test_wrap_angle_range(theta):
    w = float(wrap_angle(theta))
    assert -np.pi < w <= np.pi
    assert np.isclose(np.cos(w), np.cos(theta), atol=1e-6)


def test_wrap_angle_pi_maps_to_pi():
    assert float(wrap_angle(np.pi)) == pytest.approx(np.pi)
    assert float(wrap_angle(-np.pi)) == pytest.approx(np.pi)


def test_greedy_control_lowest_index_tie(frozen):
    u = greedy_control(frozen, lambda X: np.zeros(len(X)), np.array([0.2]))
    np.testing.assert_array_equal(u, frozen.control_grid()[0])


def test_greedy_control_batch_matches_single(di):
    value = lambda X: -np.abs(X[:, 0]) - 0.1 * X[:, 1] ** 2
    X = np.random.default_rng(1).uniform(-1, 1, size=(20, 2))
    batch = greedy_control(di, value, X)
    for x, u in zip(X, batch):
        np.testing.assert_array_equal(greedy_control(di, value, x), u)


def test_sample_initial_respects_box(di):
    X = di.sample_initial_batch(np.random.default_rng(0), 1000)
    assert np.all(X >= di.init_low) and np.all(X <= di.init_high)
