"""Discrete-time control systems.

Every system exposes a vectorised transition map ``dynamics(x, u)`` and a
failure margin ``margin(x)`` (the failure set is ``{x : margin(x) <= 0}``).
Both accept arrays with arbitrary leading batch axes so that oracles, training
and rollouts can evaluate many states at once. ``step`` and
``failure_margin`` are the checked, user-facing versions.
"""

import itertools
import warnings

import numpy as np

from .exceptions import ConfigurationError, ContractError, ControlClampWarning


def wrap_angle(theta):
    """Wrap angles to the half-open interval (-pi, pi]."""
    theta = np.asarray(theta, dtype=float)
    return theta - 2.0 * np.pi * np.ceil((theta - np.pi) / (2.0 * np.pi))


class SystemModel:
    """Base class for deterministic discrete-time systems ``x' = f(x, u)``.

    Subclasses implement :meth:`dynamics` and :meth:`margin`; both must be pure
    and vectorised over leading axes. Instances are treated as immutable after
    construction, so one instance can be shared between rollouts.

    Parameters
    ----------
    n, m : int
        State and control dimensions.
    control_bounds : array-like of shape (m, 2)
        Per-axis ``[lo, hi]`` control limits.
    dt : float
        Forward-Euler time step in seconds.
    control_grid_resolution : int or sequence of int
        Number of grid points per control axis used wherever a maximum over
        controls is needed.
    init_low, init_high : array-like of shape (n,), optional
        Box of the initial-state distribution used by :meth:`sample_initial`.
    horizon : int
        Default episode length.
    """

    name = "system"

    def __init__(self, n, m, control_bounds, dt=0.1, control_grid_resolution=5,
                 init_low=None, init_high=None, horizon=200):
        bounds = np.asarray(control_bounds, dtype=float).reshape(m, 2)
        if dt <= 0:
            raise ConfigurationError(f"dt must be positive, got {dt}")
        if np.any(bounds[:, 0] > bounds[:, 1]):
            raise ConfigurationError("control bounds need lo <= hi on every axis")
        res = np.broadcast_to(np.asarray(control_grid_resolution, dtype=int), (m,))
        if horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        self.n = int(n)
        self.m = int(m)
        self.dt = float(dt)
        self.control_bounds = bounds
        self.control_grid_resolution = tuple(int(r) for r in res)
        self.horizon = int(horizon)
        self.init_low = None if init_low is None else np.asarray(init_low, dtype=float)
        self.init_high = None if init_high is None else np.asarray(init_high, dtype=float)
        if self.init_low is not None and np.any(self.init_low > self.init_high):
            raise ConfigurationError("initial-state box needs low <= high")
        self._grid = None

    # -- to be provided by subclasses -------------------------------------
    def dynamics(self, x, u):
        raise NotImplementedError

    def margin(self, x):
        raise NotImplementedError

    def nominal_control(self, x):
        """Task controller with no safety awareness (zero control by default)."""
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1] + (self.m,))

    def is_success(self, x):
        """Task-completion predicate; systems without a goal never succeed."""
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1], dtype=bool)

    def features(self, x):
        """Input encoding for learned value functions (identity by default)."""
        return np.asarray(x, dtype=float)

    def params(self):
        """Constructor keyword arguments, used for serialisation."""
        return {}

    # -- checked interface -------------------------------------------------
    def _check_state(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.n:
            raise ContractError(
                f"{self.name}: state must have trailing dimension {self.n}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ContractError(f"{self.name}: state has non-finite entries")
        return x

    def clip_control(self, u):
        return np.clip(u, self.control_bounds[:, 0], self.control_bounds[:, 1])

    def step(self, x, u):
        """Checked transition. Out-of-bound controls are clamped with a warning."""
        x = self._check_state(x)
        u = np.asarray(u, dtype=float)
        if u.ndim == 0 and self.m == 1:
            u = u.reshape(1)
        if u.shape[-1] != self.m:
            raise ContractError(
                f"{self.name}: control must have trailing dimension {self.m}, got shape {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ContractError(f"{self.name}: control has non-finite entries")
        clipped = self.clip_control(u)
        if np.any(clipped != u):
            warnings.warn(f"{self.name}: control {u.tolist()} clamped to bounds",
                          ControlClampWarning, stacklevel=2)
        return self.dynamics(x, clipped)

    def failure_margin(self, x):
        return self.margin(self._check_state(x))

    def control_grid(self):
        """Cartesian grid of controls, first axis varying slowest.

        Both endpoints of every axis are included; a zero-width axis collapses
        to a single value.
        """
        if self._grid is None:
            self._grid = make_control_grid(self.control_bounds, self.control_grid_resolution)
        return self._grid

    def sample_initial(self, rng):
        """Draw one initial state uniformly from the initial box."""
        return self.sample_initial_batch(rng, 1)[0]

    def sample_initial_batch(self, rng, size):
        if self.init_low is None:
            raise ConfigurationError(f"{self.name} declares no initial-state box")
        rng = np.random.default_rng(rng)
        return rng.uniform(self.init_low, self.init_high, size=(size, self.n))

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({args})"


def make_control_grid(bounds, resolution):
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (len(bounds),))
    if np.any(res < 2):
        raise ConfigurationError(f"control grid resolution must be >= 2, got {res.tolist()}")
    axes = [np.unique(np.linspace(lo, hi, r)) for (lo, hi), r in zip(bounds, res)]
    return np.array(list(itertools.product(*axes)), dtype=float)


def step(sys, x, u):
    return sys.step(x, u)


def failure_margin(sys, x):
    return sys.failure_margin(x)


def control_grid(sys):
    return sys.control_grid()


class DoubleIntegrator(SystemModel):
    """Point mass on a line, state ``(p, v)``, control ``u`` = acceleration.

    Safe band ``|p| < band``; the margin is ``band - |p|``. The nominal
    controller is a PD law driving towards ``target``, which lies outside the
    band by default so that an unfiltered controller eventually fails.
    """

    name = "double_integrator"

    def __init__(self, dt=0.1, u_max=1.0, band=1.0, control_grid_resolution=5,
                 init_low=(-1.5, -2.0), init_high=(1.5, 2.0), horizon=100,
                 target=1.25, kp=1.0, kd=1.0):
        super().__init__(2, 1, [[-u_max, u_max]], dt=dt,
                         control_grid_resolution=control_grid_resolution,
                         init_low=init_low, init_high=init_high, horizon=horizon)
        self.u_max = float(u_max)
        self.band = float(band)
        self.target = float(target)
        self.kp = float(kp)
        self.kd = float(kd)

    def dynamics(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        p, v = x[..., 0], x[..., 1]
        a = u[..., 0]
        return np.stack(np.broadcast_arrays(p + v * self.dt, v + a * self.dt), axis=-1)

    def margin(self, x):
        return self.band - np.abs(np.asarray(x, dtype=float)[..., 0])

    def nominal_control(self, x):
        x = np.asarray(x, dtype=float)
        u = self.kp * (self.target - x[..., 0]) - self.kd * x[..., 1]
        return self.clip_control(u[..., None])

    def params(self):
        return dict(dt=self.dt, u_max=self.u_max, band=self.band,
                    control_grid_resolution=self.control_grid_resolution[0],
                    init_low=self.init_low.tolist(), init_high=self.init_high.tolist(),
                    horizon=self.horizon, target=self.target, kp=self.kp, kd=self.kd)


class DubinsCar(SystemModel):
    """Constant-speed Dubins car ``(x, y, theta)`` steering with ``omega``.

    The margin is the distance to a circular obstacle minus its radius.
    """

    name = "dubins"

    def __init__(self, dt=0.1, speed=1.0, omega_max=1.0, obstacle=(0.0, 0.0), radius=0.5,
                 control_grid_resolution=5, init_low=(-3.0, -3.0, -np.pi),
                 init_high=(3.0, 3.0, np.pi), horizon=100):
        super().__init__(3, 1, [[-omega_max, omega_max]], dt=dt,
                         control_grid_resolution=control_grid_resolution,
                         init_low=init_low, init_high=init_high, horizon=horizon)
        self.speed = float(speed)
        self.omega_max = float(omega_max)
        self.obstacle = np.asarray(obstacle, dtype=float)
        self.radius = float(radius)

    def dynamics(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        px, py, th = x[..., 0], x[..., 1], x[..., 2]
        w = u[..., 0]
        out = np.broadcast_arrays(px + self.speed * np.cos(th) * self.dt,
                                  py + self.speed * np.sin(th) * self.dt,
                                  wrap_angle(th + w * self.dt))
        return np.stack(out, axis=-1)

    def margin(self, x):
        x = np.asarray(x, dtype=float)
        d = np.hypot(x[..., 0] - self.obstacle[0], x[..., 1] - self.obstacle[1])
        return d - self.radius

    def params(self):
        return dict(dt=self.dt, speed=self.speed, omega_max=self.omega_max,
                    obstacle=self.obstacle.tolist(), radius=self.radius,
                    control_grid_resolution=self.control_grid_resolution[0],
                    init_low=self.init_low.tolist(), init_high=self.init_high.tolist(),
                    horizon=self.horizon)


def greedy_control(sys, value_fn, x):
    """One-step greedy control ``argmax_u V(f(x, u))`` over the control grid.

    ``value_fn`` maps an ``(N, n)`` array of states to ``(N,)`` values. Ties
    go to the lowest control-grid index. Accepts a single state or a batch.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    grid = sys.control_grid()
    nxt = sys.dynamics(xb[:, None, :], grid[None, :, :])
    vals = np.asarray(value_fn(nxt.reshape(-1, sys.n)), dtype=float).reshape(len(xb), len(grid))
    u = grid[np.argmax(vals, axis=1)]
    return u[0] if single else u
