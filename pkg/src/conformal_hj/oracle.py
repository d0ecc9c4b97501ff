"""Grid dynamic-programming oracle for the discounted safety value function.

On low-dimensional systems the fixed point of

    V(x) = (1 - gamma) h(x) + gamma * min(h(x), max_u V(f(x, u)))

is computed by synchronous value iteration on a rectilinear grid, with
multilinear interpolation (clamped to the grid hull) for off-grid successor
states. Since dynamics and grid are fixed, the interpolation weights of every
(node, control) successor are assembled once into a sparse matrix and each
sweep is a single sparse mat-vec.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dynamics import greedy_control
from .exceptions import ConfigurationError, ConvergenceError, ContractError


class StateGrid:
    """Rectilinear grid with row-major (last axis fastest) node enumeration."""

    def __init__(self, lower, upper, nodes):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        self.nodes = tuple(int(k) for k in np.broadcast_to(nodes, self.lower.shape))
        if self.lower.shape != self.upper.shape:
            raise ConfigurationError("grid bounds must have matching shapes")
        if np.any(self.lower >= self.upper):
            raise ConfigurationError("grid needs lo < hi on every axis")
        if min(self.nodes) < 2:
            raise ConfigurationError("grid needs at least 2 nodes per axis")
        self.axes = [np.linspace(lo, hi, k) for lo, hi, k in zip(self.lower, self.upper, self.nodes)]
        self.spacing = (self.upper - self.lower) / (np.asarray(self.nodes) - 1)

    @property
    def ndim(self):
        return len(self.nodes)

    @property
    def size(self):
        return int(np.prod(self.nodes))

    def points(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def interpolation(self, x):
        """Corner indices and multilinear weights for query points.

        Returns ``(idx, w)`` with shape ``(N, 2**d)`` each; queries outside the
        hull are clamped onto it.
        """
        x = np.asarray(x, dtype=float).reshape(-1, self.ndim)
        t = (np.clip(x, self.lower, self.upper) - self.lower) / self.spacing
        nodes = np.asarray(self.nodes)
        base = np.minimum(np.floor(t).astype(np.int64), nodes - 2)
        frac = t - base
        strides = np.ones(self.ndim, dtype=np.int64)
        for i in range(self.ndim - 2, -1, -1):
            strides[i] = strides[i + 1] * nodes[i + 1]
        corners = np.array(np.meshgrid(*[[0, 1]] * self.ndim, indexing="ij")).reshape(self.ndim, -1).T
        idx = np.empty((len(x), len(corners)), dtype=np.int64)
        w = np.empty((len(x), len(corners)))
        for c, offs in enumerate(corners):
            idx[:, c] = ((base + offs) * strides).sum(axis=1)
            w[:, c] = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=1)
        return idx, w

    def interpolate(self, values, x):
        idx, w = self.interpolation(x)
        return (np.asarray(values)[idx] * w).sum(axis=1)

    def to_dict(self):
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(), "nodes": list(self.nodes)}


@dataclass
class GridValueFunction:
    grid: StateGrid
    values: np.ndarray
    gamma: float

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        out = self.grid.interpolate(self.values, x)
        return out[0] if x.ndim == 1 else out.reshape(x.shape[:-1])

    def predict(self, X):
        return self.grid.interpolate(self.values, X)

    __call__ = evaluate


def successor_operator(sys, grid):
    """Sparse ``(N*K, N)`` interpolation matrix of all (node, control) successors."""
    pts = grid.points()
    controls = sys.control_grid()
    nxt = sys.dynamics(pts[:, None, :], controls[None, :, :]).reshape(-1, sys.n)
    idx, w = grid.interpolation(nxt)
    rows = np.repeat(np.arange(len(nxt)), idx.shape[1])
    op = sparse.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(len(nxt), grid.size))
    return op, len(controls)


def _backup(op, n_controls, h, values, gamma):
    best = (op @ values).reshape(-1, n_controls).max(axis=1)
    return (1.0 - gamma) * h + gamma * np.minimum(h, best)


def bellman_backup(sys, grid, values, gamma, operator=None):
    """One synchronous sweep of the discounted safety backup on all nodes."""
    values = np.asarray(values, dtype=float)
    if values.shape != (grid.size,):
        raise ContractError(f"values must have shape ({grid.size},), got {values.shape}")
    op, k = operator if operator is not None else successor_operator(sys, grid)
    h = sys.margin(grid.points())
    return _backup(op, k, h, values, gamma)


def iteration_bound(tol, first_change, gamma):
    """Sweeps sufficient for a gamma-contraction to reach sup-change < tol."""
    if first_change < tol:
        return 1
    return math.ceil(math.log(tol / first_change) / math.log(gamma)) + 1


def value_iteration(sys, grid, gamma=0.999, tol=1e-6, max_iter=None):
    """Iterate the backup from ``V_0 = h`` until the sup-norm change is below ``tol``.

    Returns ``(GridValueFunction, n_iter, residual)``. ``max_iter`` defaults to
    the contraction bound computed from the first sweep plus a small slack.
    """
    if not 0.0 <= gamma < 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1), got {gamma}")
    if tol <= 0:
        raise ConfigurationError("tol must be positive")
    op = successor_operator(sys, grid)
    h = sys.margin(grid.points())
    values = h.copy()
    cap = max_iter
    for it in range(1, 10**9):
        new = _backup(op[0], op[1], h, values, gamma)
        change = float(np.max(np.abs(new - values)))
        values = new
        if it == 1 and cap is None:
            cap = iteration_bound(tol, change, gamma) + 10 if gamma > 0 else 2
        if change < tol:
            return GridValueFunction(grid, values, gamma), it, change
        if it >= cap:
            raise ConvergenceError(
                f"value iteration did not reach tol={tol} in {it} sweeps (last change {change:.3e})")


def evaluate(gvf, x):
    return gvf.evaluate(x)


def greedy_policy(sys, gvf, x):
    return greedy_control(sys, gvf.predict, x)


class GridValueIteration(BaseEstimator):
    """Estimator wrapper around grid value iteration.

    ``fit`` ignores its data arguments: the oracle is fully determined by the
    system and the grid. After fitting, ``predict`` interpolates the converged
    values and ``policy`` returns the greedy safe control.
    """

    def __init__(self, system=None, lower=None, upper=None, nodes=101, gamma=0.999,
                 tol=1e-6, max_iter=None):
        self.system = system
        self.lower = lower
        self.upper = upper
        self.nodes = nodes
        self.gamma = gamma
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X=None, y=None):
        if self.system is None:
            raise ConfigurationError("GridValueIteration needs a system")
        lower = self.system.init_low if self.lower is None else self.lower
        upper = self.system.init_high if self.upper is None else self.upper
        grid = StateGrid(lower, upper, self.nodes)
        self.value_function_, self.n_iter_, self.residual_ = value_iteration(
            self.system, grid, self.gamma, self.tol, self.max_iter)
        return self

    def predict(self, X):
        check_is_fitted(self, "value_function_")
        X = np.asarray(X, dtype=float).reshape(-1, self.system.n)
        return self.value_function_.predict(X)

    def policy(self, X):
        check_is_fitted(self, "value_function_")
        return greedy_control(self.system, self.value_function_.predict, X)

    @property
    def grid_(self):
        return self.value_function_.grid
