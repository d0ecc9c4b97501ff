import numpy as np
import pytest

from conformal_hj.dynamics import DoubleIntegrator, SystemModel
from conformal_hj.highway import HighwaySystem


class FrozenSystem(SystemModel):
    """1D system that never moves, with ``h(x) = x``."""

    name = "frozen"

    def __init__(self, control_grid_resolution=3):
        super().__init__(1, 1, [[-1.0, 1.0]], control_grid_resolution=control_grid_resolution,
                         init_low=[-1.0], init_high=[1.0], horizon=20)

    def dynamics(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return np.broadcast_to(x, np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (1,)).copy()

    def margin(self, x):
        return np.asarray(x, dtype=float)[..., 0]


class AlwaysSafe(DoubleIntegrator):
    """Double integrator whose margin is identically one."""

    name = "always_safe"

    def margin(self, x):
        return np.ones(np.asarray(x).shape[:-1])


class ConstantValue:
    """Stand-in calibrated model with a fixed value and quantile."""

    def __init__(self, sys, value, q=0.0, control=None):
        self.sys = sys
        self.value = value
        self.q = q
        self.control = control

    def quantile(self, alpha=None):
        return self.q

    def predict(self, X):
        X = np.asarray(X, dtype=float).reshape(-1, self.sys.n)
        v = self.value(X) if callable(self.value) else np.full(len(X), float(self.value))
        return np.asarray(v, dtype=float)

    def lower_bound(self, X, alpha=None):
        return self.predict(X) - self.q

    def policy(self, X):
        X = np.asarray(X, dtype=float)
        if self.control is not None:
            u = np.broadcast_to(np.asarray(self.control, dtype=float), X.shape[:-1] + (self.sys.m,))
            return u.copy()
        from conformal_hj.dynamics import greedy_control
        return greedy_control(self.sys, self.predict, X)


@pytest.fixture
def di():
    return DoubleIntegrator()


@pytest.fixture
def frozen():
    return FrozenSystem()


@pytest.fixture
def highway():
    return HighwaySystem()


# -- acceptance reporting -----------------------------------------------------

ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    """Remember one acceptance verdict for the end-of-run summary."""
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
