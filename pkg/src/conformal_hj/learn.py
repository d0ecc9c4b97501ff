"""Learned safety value functions by fitted safety value iteration.

A tanh multilayer perceptron ``V_theta`` is regressed onto the discounted
safety target

    y = (1 - gamma) h(x) + gamma * min(h(x), max_u V_target(f(x, u)))

where the maximum runs over the system's control grid and ``V_target`` is a
slowly blended copy of the network. The safe policy is the one-step greedy
controller ``argmax_u V_theta(f(x, u))``. Data is gathered in rounds with the
uncalibrated switched policy (nominal unless ``V_theta(f(x, pi_nom(x))) <= 0``)
plus uniform exploration noise.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dynamics import greedy_control
from .exceptions import ConfigurationError, ContractError, TrainingError

logger = logging.getLogger(__name__)


class MLP:
    """Fully connected network, tanh hidden layers, linear scalar output.

    Inputs are standardised with ``(x - x_shift) / x_scale`` and the raw
    output is mapped back with ``y_shift + y_scale * out``; these affine maps
    are fixed (not trained).
    """

    def __init__(self, weights, biases, x_shift=None, x_scale=None, y_shift=0.0, y_scale=1.0):
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        n_in = self.weights[0].shape[0]
        self.x_shift = np.zeros(n_in) if x_shift is None else np.asarray(x_shift, dtype=float)
        self.x_scale = np.ones(n_in) if x_scale is None else np.asarray(x_scale, dtype=float)
        self.y_shift = float(y_shift)
        self.y_scale = float(y_scale)

    @classmethod
    def initialize(cls, sizes, rng, **scaling):
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(rng)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, **scaling)

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def params(self):
        return self.weights + self.biases

    def copy(self):
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.x_shift.copy(), self.x_scale.copy(), self.y_shift, self.y_scale)

    def _forward(self, X):
        a = (X - self.x_shift) / self.x_scale
        acts = [a]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            a = z if i == last else np.tanh(z)
            acts.append(a)
        return acts

    def raw(self, X):
        return self._forward(np.asarray(X, dtype=float))[-1][:, 0]

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        return self.y_shift + self.y_scale * self._forward(X.reshape(-1, X.shape[-1]))[-1][:, 0]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = self.predict(x)
        return out[0] if x.ndim == 1 else out.reshape(x.shape[:-1])

    def loss_and_grad(self, X, y):
        """Mean squared error in standardised output units and its gradient.

        Returns ``(loss, grads)`` where ``grads`` follows the order of
        :attr:`params` (weights first, then biases).
        """
        X = np.asarray(X, dtype=float)
        target = (np.asarray(y, dtype=float) - self.y_shift) / self.y_scale
        acts = self._forward(X)
        err = acts[-1][:, 0] - target
        loss = float(np.mean(err ** 2))
        delta = (2.0 / len(X)) * err[:, None]
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            gw[i] = acts[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.weights[i].T) * (1.0 - acts[i] ** 2)
        return loss, gw + gb

    def is_finite(self):
        return all(np.all(np.isfinite(p)) for p in self.params)


class TransitionBuffer:
    """Ring buffer of ``(x_t, u_t, x_{t+1})`` triplets."""

    def __init__(self, capacity, n, m):
        if capacity < 1:
            raise ConfigurationError("buffer capacity must be positive")
        self.capacity = int(capacity)
        self.states = np.empty((capacity, n))
        self.controls = np.empty((capacity, m))
        self.next_states = np.empty((capacity, n))
        self.count = 0

    def __len__(self):
        return min(self.count, self.capacity)

    def add(self, x, u, x_next):
        x, u, x_next = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (x, u, x_next))
        if not (len(x) == len(u) == len(x_next)):
            raise ContractError("triplet arrays must have equal length")
        if x.shape[1] != self.states.shape[1] or x_next.shape[1] != self.states.shape[1] \
                or u.shape[1] != self.controls.shape[1]:
            raise ContractError("triplet dimensions do not match the buffer")
        skip = max(0, len(x) - self.capacity)
        self.count += skip
        x, u, x_next = x[skip:], u[skip:], x_next[skip:]
        idx = (self.count + np.arange(len(x))) % self.capacity
        self.states[idx], self.controls[idx], self.next_states[idx] = x, u, x_next
        self.count += len(x)

    def training_states(self):
        k = len(self)
        return np.concatenate([self.states[:k], self.next_states[:k]])


@dataclass
class TrainConfig:
    gamma: float = 0.999
    learning_rate: float = 1e-2
    batch_size: int = 128
    n_steps: int = 20000
    tau: float = 0.005
    noise: float = 0.2
    episodes: int = 200
    rounds: int = 5
    safe_fraction: float = 0.5
    hidden: tuple = (64, 64)
    pretrain_steps: int = 2000
    buffer_capacity: int = 200000
    horizon: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in (0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigurationError("tau must lie in (0, 1]")
        for name in ("batch_size", "n_steps", "episodes", "rounds", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if not 0.0 <= self.safe_fraction <= 1.0:
            raise ConfigurationError("safe_fraction must lie in [0, 1]")
        if self.learning_rate <= 0 or self.noise < 0 or self.pretrain_steps < 0:
            raise ConfigurationError("learning_rate must be > 0, noise and pretrain_steps >= 0")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def td_target(h, max_next, gamma):
    """Discounted safety Bellman target (vectorised)."""
    h = np.asarray(h, dtype=float)
    return (1.0 - gamma) * h + gamma * np.minimum(h, max_next)


class SafetyValueRegressor(RegressorMixin, BaseEstimator):
    """Fitted safety value iteration for one system.

    ``fit(X)`` treats the rows of ``X`` as the state distribution to train
    on; targets are generated from the Bellman operator, so no ``y`` is used.
    With ``warm_start=True`` a second ``fit`` continues from the current
    network and target network instead of reinitialising.

    Before the first fixed-point step the network is regressed onto ``h``
    for ``pretrain_steps`` steps, mirroring the ``V_0 = h`` start of exact
    value iteration: with ``gamma`` close to one an under-estimating start
    would only rise by a factor ``1 - gamma`` per backup.
    """

    def __init__(self, system=None, hidden=(64, 64), gamma=0.999, learning_rate=1e-2,
                 batch_size=128, n_steps=20000, tau=0.005, pretrain_steps=2000,
                 warm_start=False, random_state=None):
        self.system = system
        self.hidden = hidden
        self.gamma = gamma
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.tau = tau
        self.pretrain_steps = pretrain_steps
        self.warm_start = warm_start
        self.random_state = random_state

    def _init_network(self, X, rng):
        h = self.system.margin(X)
        F = self.system.features(X)
        scale = F.std(axis=0)
        scaling = dict(x_shift=F.mean(axis=0), x_scale=np.where(scale > 1e-12, scale, 1.0),
                       y_shift=float(h.mean()), y_scale=float(h.std()) or 1.0)
        sizes = [F.shape[1], *self.hidden, 1]
        self.network_ = MLP.initialize(sizes, rng, **scaling)
        self.loss_curve_ = []
        self.n_steps_done_ = 0
        for _ in range(self.pretrain_steps):
            idx = rng.integers(0, len(X), self.batch_size)
            _, grads = self.network_.loss_and_grad(F[idx], h[idx])
            self._apply(grads)
        self.target_network_ = self.network_.copy()

    def _apply(self, grads):
        for p, g in zip(self.network_.params, grads):
            p -= self.learning_rate * g

    def fit(self, X, y=None):
        if self.system is None:
            raise ConfigurationError("SafetyValueRegressor needs a system")
        X = check_array(X, dtype=float)
        if X.shape[1] != self.system.n:
            raise ContractError(f"expected {self.system.n} state columns, got {X.shape[1]}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in [0, 1)")
        if not hasattr(self, "_rng") or not self.warm_start:
            self._rng = np.random.default_rng(self.random_state)
        rng = self._rng
        if not (self.warm_start and hasattr(self, "network_")):
            self._init_network(X, rng)

        controls = self.system.control_grid()
        n_u = len(controls)
        n = self.system.n
        feat = self.system.features
        for _ in range(self.n_steps):
            idx = rng.integers(0, len(X), self.batch_size)
            xb = X[idx]
            nxt = self.system.dynamics(xb[:, None, :], controls[None, :, :]).reshape(-1, n)
            best = self.target_network_.predict(feat(nxt)).reshape(-1, n_u).max(axis=1)
            yb = td_target(self.system.margin(xb), best, self.gamma)
            loss, grads = self.network_.loss_and_grad(feat(xb), yb)
            self._apply(grads)
            for p, q in zip(self.target_network_.params, self.network_.params):
                p *= 1.0 - self.tau
                p += self.tau * q
            self.n_steps_done_ += 1
            if not np.isfinite(loss) or loss > 1e6 or not self.network_.is_finite():
                raise TrainingError(
                    f"training diverged at step {self.n_steps_done_}: loss={loss:.3e}, "
                    f"learning_rate={self.learning_rate}, last losses={self.loss_curve_[-5:]}")
            if self.n_steps_done_ % 100 == 0:
                self.loss_curve_.append((self.n_steps_done_, loss))
        if self.loss_curve_:
            logger.debug("fit done: %d steps, loss %.4g", self.n_steps_done_, self.loss_curve_[-1][1])
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        X = np.asarray(X, dtype=float)
        return self.network_.predict(self.system.features(X.reshape(-1, self.system.n)))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = self.predict(x)
        return float(out[0]) if x.ndim == 1 else out.reshape(x.shape[:-1])

    def policy(self, X):
        """Greedy safe control(s) at ``X``."""
        check_is_fitted(self, "network_")
        return greedy_control(self.system, self.predict, X)

    @classmethod
    def from_network(cls, system, network, **params):
        """Wrap an existing network as a fitted regressor (e.g. after loading)."""
        est = cls(system=system, hidden=tuple(network.sizes[1:-1]), **params)
        est.network_ = network
        est.target_network_ = network.copy()
        est.loss_curve_ = []
        est.n_steps_done_ = 0
        return est


def safe_policy(sys, value_fn, x):
    """Greedy ``argmax_u V(f(x, u))``; ``value_fn`` is an MLP or fitted regressor."""
    return greedy_control(sys, value_fn.predict, x)


def value_of(sys, value_fn, x):
    return value_fn(x)


class _Always:
    """Constant stand-in value function (e.g. +inf before any training)."""

    def __init__(self, value):
        self.value = float(value)

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        return np.full(X.reshape(-1, X.shape[-1]).shape[0], self.value)


def constant_value(value):
    return _Always(value)


def collect_transitions(sys, value_fn=None, episodes=10, noise=0.2, seed=None,
                        horizon=None, buffer=None, nominal=None, threshold=0.0):
    """Roll out the switched policy and record all transitions.

    The nominal controller is used unless ``value_fn(f(x, pi_nom(x))) <=
    threshold`` (0 by default), in which case the greedy safe control is
    applied. ``threshold`` may be an array with one entry per episode. Uniform
    noise on ``[-noise, noise]`` is added per control axis before clamping.
    Episodes end on failure, task success or after ``horizon`` steps.
    ``value_fn=None`` means an optimistic ``+inf`` value, i.e. pure nominal
    rollouts.
    """
    rng = np.random.default_rng(seed)
    horizon = sys.horizon if horizon is None else int(horizon)
    value_fn = constant_value(np.inf) if value_fn is None else value_fn
    nominal = sys.nominal_control if nominal is None else nominal
    if buffer is None:
        buffer = TransitionBuffer(max(episodes * horizon, 1), sys.n, sys.m)
    thresholds = np.broadcast_to(np.asarray(threshold, dtype=float), (episodes,))
    x = sys.sample_initial_batch(rng, episodes)
    alive = np.ones(episodes, dtype=bool)
    for _ in range(horizon):
        if not alive.any():
            break
        xa = x[alive]
        u_nom = nominal(xa)
        unsafe = value_fn.predict(sys.dynamics(xa, u_nom)) <= thresholds[alive]
        u = u_nom.copy()
        if unsafe.any():
            u[unsafe] = greedy_control(sys, value_fn.predict, xa[unsafe])
        if noise > 0:
            u = u + rng.uniform(-noise, noise, size=u.shape)
        u = sys.clip_control(u)
        nxt = sys.dynamics(xa, u)
        buffer.add(xa, u, nxt)
        x[alive] = nxt
        done = (sys.margin(xa) <= 0) | (sys.margin(nxt) <= 0) | sys.is_success(nxt)
        alive[np.flatnonzero(alive)[done]] = False
    return buffer


def fit_value_function(sys, cfg, seed=None):
    """Alternate data collection and fitting for ``cfg.rounds`` rounds."""
    seed = cfg.seed if seed is None else seed
    collect_seq, fit_seq = np.random.SeedSequence(seed).spawn(2)
    collect_rngs = [np.random.default_rng(s) for s in collect_seq.spawn(cfg.rounds)]
    est = SafetyValueRegressor(
        system=sys, hidden=cfg.hidden, gamma=cfg.gamma, learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size, tau=cfg.tau, pretrain_steps=cfg.pretrain_steps,
        warm_start=True, random_state=np.random.default_rng(fit_seq))
    buffer = TransitionBuffer(cfg.buffer_capacity, sys.n, sys.m)
    per_round = np.full(cfg.rounds, cfg.n_steps // cfg.rounds)
    per_round[: cfg.n_steps % cfg.rounds] += 1
    for r in range(cfg.rounds):
        current = est if hasattr(est, "network_") else None
        threshold = np.zeros(cfg.episodes)
        if current is not None:
            threshold[: int(round(cfg.safe_fraction * cfg.episodes))] = np.inf
        collect_transitions(sys, current, cfg.episodes, cfg.noise, collect_rngs[r],
                            horizon=cfg.horizon, buffer=buffer, threshold=threshold)
        est.set_params(n_steps=int(per_round[r]))
        est.fit(buffer.training_states())
        logger.info("round %d/%d: buffer=%d loss=%.4g", r + 1, cfg.rounds, len(buffer),
                    est.loss_curve_[-1][1] if est.loss_curve_ else float("nan"))
    est.set_params(n_steps=cfg.n_steps, random_state=seed)
    return est


def train(sys, buffer, cfg, seed=None):
    """Fit a value network on a fixed buffer (no further data collection)."""
    seed = cfg.seed if seed is None else seed
    if len(buffer) == 0:
        raise ContractError("training buffer is empty")
    est = SafetyValueRegressor(
        system=sys, hidden=cfg.hidden, gamma=cfg.gamma, learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size, n_steps=cfg.n_steps, tau=cfg.tau,
        pretrain_steps=cfg.pretrain_steps, random_state=seed)
    return est.fit(buffer.training_states())


def train_ensemble(sys, cfg, members, base_seed=0):
    """Train ``members`` models with seeds ``base_seed + j``."""
    if members < 1:
        raise ConfigurationError("ensemble needs at least one member")
    models = []
    for j in range(members):
        try:
            models.append(fit_value_function(sys, cfg, seed=base_seed + j))
        except TrainingError as exc:
            raise TrainingError(f"ensemble member {j} (seed {base_seed + j}): {exc}") from exc
    return models
