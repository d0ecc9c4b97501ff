"""Triple-vehicle highway takeover environment.

State layout (10 entries)::

    [x_f, y_f, v_f, x_e, y_e, v_e, theta_e, x_l, y_l, v_l]

``f`` is the front vehicle driving in the ego's direction, ``l`` the lateral
vehicle driving the opposite way, ``e`` the ego vehicle with unicycle
dynamics controlled by ``(acceleration, angular velocity)``.
"""

import enum
from dataclasses import dataclass

import numpy as np

from .dynamics import SystemModel, wrap_angle
from .exceptions import ConfigurationError, ContractError

XF, YF, VF, XE, YE, VE, TH, XL, YL, VL = range(10)
STATE_NAMES = ("x_f", "y_f", "v_f", "x_e", "y_e", "v_e", "theta_e", "x_l", "y_l", "v_l")

INIT_LOW = (0.0, 10.0, 0.5, 0.3, 0.0, 0.5, np.pi / 4, 1.6, 5.0, 0.5)
INIT_HIGH = (1.0, 15.0, 2.0, 1.7, 5.0, 3.0, 3 * np.pi / 4, 2.0, 10.0, 1.5)


class Outcome(str, enum.Enum):
    SUCCESS = "success"
    VIOLATION = "violation"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class EpisodeOutcome:
    kind: Outcome
    terminal_step: int
    min_margin: float


@dataclass(frozen=True)
class HighwayConfig:
    x_min: float = 0.0
    x_max: float = 2.0
    collision_radius: float = 0.5
    success_y: float = 20.0
    horizon: int = 200
    h_scale: float = 10.0
    dt: float = 0.1
    init_low: tuple = INIT_LOW
    init_high: tuple = INIT_HIGH
    accel_bounds: tuple = (-1.0, 1.0)
    omega_bounds: tuple = (-1.0, 1.0)
    min_speed: float | None = 0.0
    control_grid_resolution: int = 5
    target_speed: float = 2.0
    target_x: float = 1.0
    k_v: float = 1.0
    k_theta: float = 1.0
    k_x: float = 0.25

    def __post_init__(self):
        if np.any(np.asarray(self.init_low) > np.asarray(self.init_high)):
            raise ConfigurationError("init bounds need a <= b componentwise")
        if not self.x_min < self.x_max:
            raise ConfigurationError("road boundaries need x_min < x_max")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")


class HighwaySystem(SystemModel):
    name = "highway"

    def __init__(self, config=None, **overrides):
        if config is None:
            config = HighwayConfig(**overrides)
        elif overrides:
            raise TypeError("pass either a HighwayConfig or keyword overrides")
        self.config = config
        super().__init__(10, 2, [config.accel_bounds, config.omega_bounds], dt=config.dt,
                         control_grid_resolution=config.control_grid_resolution,
                         init_low=config.init_low, init_high=config.init_high,
                         horizon=config.horizon)

    def dynamics(self, x, u):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        shape = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
        x = np.broadcast_to(x, shape + (10,))
        u = np.broadcast_to(u, shape + (2,))
        dt = self.dt
        c = self.config
        out = np.array(x)
        th = x[..., TH]
        v = x[..., VE]
        out[..., XE] = x[..., XE] + v * np.cos(th) * dt
        out[..., YE] = x[..., YE] + v * np.sin(th) * dt
        out[..., VE] = v + u[..., 0] * dt
        if c.min_speed is not None:
            out[..., VE] = np.maximum(out[..., VE], c.min_speed)
        out[..., TH] = wrap_angle(th + u[..., 1] * dt)
        out[..., YF] = x[..., YF] + x[..., VF] * dt
        out[..., YL] = x[..., YL] - x[..., VL] * dt
        return out

    def margin(self, x):
        x = np.asarray(x, dtype=float)
        c = self.config
        d_front = np.hypot(x[..., XE] - x[..., XF], x[..., YE] - x[..., YF]) - c.collision_radius
        d_lat = np.hypot(x[..., XE] - x[..., XL], x[..., YE] - x[..., YL]) - c.collision_radius
        left = x[..., XE] - c.x_min
        right = c.x_max - x[..., XE]
        return c.h_scale * np.minimum(np.minimum(d_front, d_lat), np.minimum(left, right))

    def nominal_control(self, x):
        """Proportional tracking of speed, heading and lane centre.

        Ignores the other vehicles. Heading is measured from the +x axis, so a
        heading below pi/2 moves the ego towards larger x; the lane-centre term
        therefore tilts the target heading by ``k_x * (x_e - target_x)``.
        """
        x = np.asarray(x, dtype=float)
        c = self.config
        accel = c.k_v * (c.target_speed - x[..., VE])
        heading = np.pi / 2 + c.k_x * (x[..., XE] - c.target_x)
        omega = c.k_theta * (heading - x[..., TH])
        return self.clip_control(np.stack([accel, omega], axis=-1))

    def features(self, x):
        """Translation-invariant encoding used as value-network input.

        Safety does not depend on absolute ``y``, so only relative vehicle
        positions enter, together with heading as (cos, sin), the speeds and
        the four unscaled margin terms.
        """
        x = np.asarray(x, dtype=float)
        c = self.config
        dxf, dyf = x[..., XE] - x[..., XF], x[..., YE] - x[..., YF]
        dxl, dyl = x[..., XE] - x[..., XL], x[..., YE] - x[..., YL]
        cols = [x[..., XE], dxf, dyf, dxl, dyl, x[..., VE], np.cos(x[..., TH]), np.sin(x[..., TH]),
                x[..., VF], x[..., VL],
                np.hypot(dxf, dyf) - c.collision_radius, np.hypot(dxl, dyl) - c.collision_radius,
                x[..., XE] - c.x_min, c.x_max - x[..., XE]]
        return np.stack(cols, axis=-1)

    def is_success(self, x):
        return np.asarray(x, dtype=float)[..., YE] >= self.config.success_y

    def params(self):
        c = self.config
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in c.__dict__.items()}


def sample_initial(rng_seed, config=None):
    """One initial highway state, uniform on the configured box."""
    config = config or HighwayConfig()
    rng = np.random.default_rng(rng_seed)
    return rng.uniform(np.asarray(config.init_low), np.asarray(config.init_high))


def highway_h(state, config=None):
    return HighwaySystem(config).margin(state)


def highway_step(state, u, config=None):
    return HighwaySystem(config).step(state, u)


def nominal_control(state, config=None):
    return HighwaySystem(config).nominal_control(state)


def classify(trajectory, sys, horizon=None):
    """Classify a state trajectory as violation, success or timeout.

    ``trajectory`` holds the visited states ``x_0 .. x_T``; the terminal step
    is ``T``. A violation takes precedence over success. ``horizon``
    defaults to the system's episode length.
    """
    horizon = sys.horizon if horizon is None else horizon
    traj = np.asarray(trajectory, dtype=float)
    if traj.ndim != 2 or len(traj) == 0:
        raise ContractError("classify needs a non-empty (T+1, n) trajectory")
    margins = sys.margin(traj)
    min_margin = float(margins.min())
    if min_margin <= 0:
        return EpisodeOutcome(Outcome.VIOLATION, int(np.argmax(margins <= 0)), min_margin)
    hits = np.flatnonzero(sys.is_success(traj))
    if hits.size and hits[0] <= horizon:
        return EpisodeOutcome(Outcome.SUCCESS, int(hits[0]), min_margin)
    return EpisodeOutcome(Outcome.TIMEOUT, len(traj) - 1, min_margin)
