"""Split conformal calibration of learned safety values.

The nonconformity score of a state is how far the learned value overestimates
the safety return actually achieved by rolling out the learned safe policy:

    s(x) = max(0, V_theta(x) - V*(x))

and the calibrated lower bound is ``V_theta(x) - q(alpha)`` with ``q(alpha)``
the ``ceil((n + 1)(1 - alpha))``-th smallest calibration score.
"""

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .dynamics import greedy_control
from .exceptions import ContractError

logger = logging.getLogger(__name__)


def _exact(value):
    # (n + 1) * alpha products must land on integers exactly when they should
    if isinstance(value, (Fraction, int)):
        return Fraction(value)
    return Fraction(repr(float(value)))


def conformal_index(n, alpha):
    """Rank ``k = ceil((n + 1)(1 - alpha))`` of the conformal quantile."""
    if n < 1:
        raise ContractError("need at least one calibration score")
    a = _exact(alpha)
    if not 0 < a < 1:
        raise ContractError(f"alpha must lie in (0, 1), got {alpha}")
    return math.ceil((n + 1) * (1 - a))


def conformal_quantile(scores, alpha):
    """k-th smallest score, or ``+inf`` when ``k > n``."""
    s = np.sort(np.asarray(scores, dtype=float).ravel())
    if s.size == 0:
        raise ContractError("conformal_quantile needs a non-empty score set")
    k = conformal_index(s.size, alpha)
    return float("inf") if k > s.size else float(s[k - 1])


def conditional_coverage_beta(n, alpha):
    """Beta shape ``(n + 1 - l, l)`` of the coverage given a calibration set.

    ``l = floor((n + 1) * alpha)``; ``l = 0`` means the quantile index
    overflows and the interval is vacuous.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    a = _exact(alpha)
    if not 0 < a < 1:
        raise ContractError(f"alpha must lie in (0, 1), got {alpha}")
    l = math.floor((n + 1) * a)
    if l < 1:
        raise ContractError(
            f"floor((n + 1) * alpha) = 0 for n={n}, alpha={alpha}; increase n or alpha")
    return n + 1 - l, l


def nonconformity(v_theta, v_star):
    return np.maximum(0.0, np.asarray(v_theta, dtype=float) - np.asarray(v_star, dtype=float))


@dataclass(frozen=True)
class CalibrationPoint:
    state: np.ndarray
    v_theta: float
    v_star: float
    score: float


def fold_vstar(margins, boundary, gamma):
    """Backward fold of ``V*_i = (1-g) h_i + g min(h_i, V*_{i+1})``.

    ``margins`` are ``h`` at the states before the terminal one and
    ``boundary`` is the terminal value.
    """
    v = float(boundary)
    for h in reversed(list(margins)):
        v = (1.0 - gamma) * h + gamma * min(h, v)
    return v


def rollout_vstar_batch(sys, policy, value_fn, X, gamma, horizon):
    """Achieved safety return of ``policy`` from each row of ``X``.

    Simulates until the failure set is entered (terminal value ``h``) or
    ``horizon`` steps have passed (terminal value ``value_fn``), then folds the
    discounted recursion backwards.
    """
    X = np.array(X, dtype=float, ndmin=2)
    if horizon < 0:
        raise ContractError("horizon must be >= 0")
    B = len(X)
    hs = np.empty((horizon + 1, B))
    term = np.full(B, horizon)
    boundary = np.empty(B)
    alive = np.ones(B, dtype=bool)
    for t in range(horizon + 1):
        h = sys.margin(X)
        hs[t] = h
        fail = alive & (h <= 0)
        term[fail] = t
        boundary[fail] = h[fail]
        alive &= ~fail
        if not alive.any():
            break
        if t == horizon:
            boundary[alive] = value_fn(X[alive])
            break
        xa = X[alive]
        X[alive] = sys.dynamics(xa, policy(xa))
    v = boundary
    for t in range(horizon - 1, -1, -1):
        m = t < term
        if m.any():
            v[m] = (1.0 - gamma) * hs[t, m] + gamma * np.minimum(hs[t, m], v[m])
    return v


def rollout_vstar(sys, policy, value_fn, x, gamma, horizon):
    """Single-state version of :func:`rollout_vstar_batch`."""
    x = np.asarray(x, dtype=float)
    return float(rollout_vstar_batch(sys, policy, value_fn, x[None], gamma, horizon)[0])


def switched_rollout_sample(sys, value_fn, n_traj, horizon, rng, nominal=None):
    """Run ``n_traj`` threshold-0 switched episodes, keep one uniform state each.

    Returns ``(states, lengths)``: the sampled state per trajectory (uniform
    over the visited states ``x_0 .. x_T`` by reservoir sampling) and the
    number of visited states.
    """
    rng = np.random.default_rng(rng)
    nominal = sys.nominal_control if nominal is None else nominal
    x = sys.sample_initial_batch(rng, n_traj)
    chosen = x.copy()
    count = np.ones(n_traj)
    alive = ~((sys.margin(x) <= 0) | sys.is_success(x))
    for _ in range(horizon):
        if not alive.any():
            break
        xa = x[alive]
        u = nominal(xa)
        unsafe = value_fn(sys.dynamics(xa, u)) <= 0
        if unsafe.any():
            u[unsafe] = greedy_control(sys, value_fn, xa[unsafe])
        nxt = sys.dynamics(xa, u)
        idx = np.flatnonzero(alive)
        x[idx] = nxt
        count[idx] += 1
        take = rng.random(len(idx)) < 1.0 / count[idx]
        chosen[idx[take]] = nxt[take]
        alive[idx[(sys.margin(nxt) <= 0) | sys.is_success(nxt)]] = False
    return chosen, count.astype(int)


def build_calibration_set(sys, model, n_traj, gamma, horizon, seed=None, nominal=None):
    """Calibration points from ``n_traj`` independent switched trajectories.

    ``model`` is a fitted value estimator exposing ``predict`` and ``policy``.
    """
    if n_traj < 1:
        raise ContractError("n_traj must be >= 1")
    rng = np.random.default_rng(seed)
    states, _ = switched_rollout_sample(sys, model.predict, n_traj, horizon, rng, nominal)
    v_star = rollout_vstar_batch(sys, model.policy, model.predict, states, gamma, horizon)
    v_theta = model.predict(states)
    scores = nonconformity(v_theta, v_star)
    return [CalibrationPoint(s, float(a), float(b), float(c))
            for s, a, b, c in zip(states, v_theta, v_star, scores)]


class CalibratedValueFunction(BaseEstimator):
    """A value estimator together with its conformal score distribution.

    ``fit(X, y)`` takes calibration states ``X`` and their achieved safety
    returns ``y`` (``V*``). ``lower_bound`` then gives ``V_theta(x) - q(alpha)``.
    """

    def __init__(self, estimator=None, alpha=0.1):
        self.estimator = estimator
        self.alpha = alpha

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        v_theta = self.estimator.predict(X)
        return self.fit_scores(nonconformity(v_theta, y))

    def fit_scores(self, scores):
        scores = np.sort(np.asarray(scores, dtype=float).ravel())
        if scores.size == 0:
            raise ContractError("calibration needs at least one score")
        if np.any(scores < 0) or not np.all(np.isfinite(scores)):
            raise ContractError("scores must be finite and non-negative")
        self.scores_ = scores
        self.n_calibration_ = int(scores.size)
        return self

    def quantile(self, alpha=None):
        check_is_fitted(self, "scores_")
        alpha = self.alpha if alpha is None else alpha
        k = conformal_index(self.n_calibration_, alpha)
        return float("inf") if k > self.n_calibration_ else float(self.scores_[k - 1])

    def quantiles(self, alphas):
        return {float(a): self.quantile(a) for a in alphas}

    def predict(self, X):
        return self.estimator.predict(X)

    def lower_bound(self, X, alpha=None):
        return self.predict(X) - self.quantile(alpha)

    def policy(self, X):
        return self.estimator.policy(X)

    @property
    def system(self):
        return self.estimator.system


def lower_bound(model, x, alpha):
    x = np.asarray(x, dtype=float)
    out = model.lower_bound(x.reshape(-1, x.shape[-1]), alpha)
    return float(out[0]) if x.ndim == 1 else out


def calibrate(sys, model, n_traj, gamma, horizon, seed=None, alpha=0.1, nominal=None):
    """Build a calibration set and return ``(CalibratedValueFunction, points)``."""
    points = build_calibration_set(sys, model, n_traj, gamma, horizon, seed, nominal)
    cal = CalibratedValueFunction(model, alpha).fit_scores([p.score for p in points])
    return cal, points


# -- coverage experiments over a finite pool of (V_theta, V*) pairs -----------

def marginal_coverage(v_theta, v_star, n_cal, n_test, alpha, reps, seed=None):
    """Mean frequency of ``V* >= V_theta - q`` over resampled splits.

    Calibration and test points are drawn i.i.d. (with replacement) from the
    pool, so the split is exchangeable by construction.
    """
    rng = np.random.default_rng(seed)
    v_theta = np.asarray(v_theta, dtype=float)
    v_star = np.asarray(v_star, dtype=float)
    scores = nonconformity(v_theta, v_star)
    cover = np.empty(reps)
    for r in range(reps):
        cal = rng.integers(0, len(scores), n_cal)
        test = rng.integers(0, len(scores), n_test)
        q = conformal_quantile(scores[cal], alpha)
        cover[r] = np.mean(v_star[test] >= v_theta[test] - q)
    return float(cover.mean()), cover


def conditional_coverages(v_theta, v_star, n_cal, alpha, reps, seed=None):
    """Coverage of each resampled calibration set, exact w.r.t. the pool."""
    rng = np.random.default_rng(seed)
    v_theta = np.asarray(v_theta, dtype=float)
    v_star = np.asarray(v_star, dtype=float)
    scores = nonconformity(v_theta, v_star)
    out = np.empty(reps)
    for r in range(reps):
        q = conformal_quantile(scores[rng.integers(0, len(scores), n_cal)], alpha)
        out[r] = np.mean(v_star >= v_theta - q)
    return out
