"""Switched safety filters and the episode runner.

``SwitchedPolicy`` keeps the nominal control while the calibrated lower bound
on the value of the nominal successor state is strictly positive and otherwise
applies the learned safe control at the current state. ``EnsembleSwitchedPolicy``
does the same with several calibrated members, trusting the nominal controller
if any member's bound is positive and otherwise following the member with the
largest bound (``MULTIPLE``) or the member chosen when the unsafe stretch began
(``SINGLE``).
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractError
from .highway import classify


class Strategy(str, enum.Enum):
    SINGLE = "single"
    MULTIPLE = "multiple"


NOMINAL = "nominal"
SAFE = "safe"


@dataclass(frozen=True)
class StepRecord:
    step: int
    state: tuple
    x_next: tuple
    lower_bounds: tuple
    controller: str
    active: int | None
    control: tuple

    def to_dict(self):
        return {"step": self.step, "state": list(self.state), "x_next": list(self.x_next),
                "lower_bounds": list(self.lower_bounds), "controller": self.controller,
                "active": self.active, "control": list(self.control)}


@dataclass
class FilterTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def append(self, record):
        self.records.append(record)

    @property
    def decisions(self):
        return [(r.controller, r.active) for r in self.records]

    def to_records(self):
        return [r.to_dict() for r in self.records]


def _tuple(a):
    return tuple(float(v) for v in np.asarray(a, dtype=float).ravel())


class NominalPolicy:
    """Unfiltered nominal controller."""

    label = "nominal"

    def __init__(self, system):
        self.system = system

    def reset(self):
        pass

    def act(self, x, step=0):
        u = self.system.nominal_control(x)
        x_next = self.system.dynamics(x, u)
        return u, StepRecord(step, _tuple(x), _tuple(x_next), (), NOMINAL, None, _tuple(u))


def switched_step(sys, model, alpha, x, nominal=None, step=0, quantile=None):
    """One decision of the single-model calibrated filter.

    Returns ``(control, record)``. The lower bound is ``V(x_next) - q(alpha)``
    with ``x_next = f(x, pi_nom(x))``; only a strictly positive bound keeps
    the nominal control.
    """
    nominal = sys.nominal_control if nominal is None else nominal
    q = model.quantile(alpha) if quantile is None else quantile
    u_nom = nominal(x)
    x_next = sys.dynamics(x, u_nom)
    bound = float(model.predict(x_next[None])[0]) - q
    if bound > 0:
        return u_nom, StepRecord(step, _tuple(x), _tuple(x_next), (bound,), NOMINAL, None, _tuple(u_nom))
    u = np.asarray(model.policy(x), dtype=float)
    return u, StepRecord(step, _tuple(x), _tuple(x_next), (bound,), SAFE, 0, _tuple(u))


def ensemble_step(sys, models, alpha, strategy, x, active=None, nominal=None, step=0,
                  quantiles=None):
    """One decision of the ensemble filter; returns ``(control, active, record)``."""
    if len(models) == 0:
        raise ContractError("ensemble_step needs at least one model")
    strategy = Strategy(strategy)
    nominal = sys.nominal_control if nominal is None else nominal
    qs = [m.quantile(alpha) for m in models] if quantiles is None else quantiles
    u_nom = nominal(x)
    x_next = sys.dynamics(x, u_nom)
    bounds = tuple(float(m.predict(x_next[None])[0]) - q for m, q in zip(models, qs))
    if max(bounds) > 0:
        return u_nom, None, StepRecord(step, _tuple(x), _tuple(x_next), bounds, NOMINAL, None,
                                       _tuple(u_nom))
    if not (strategy is Strategy.SINGLE and active is not None):
        active = int(np.argmax(bounds))
    u = np.asarray(models[active].policy(x), dtype=float)
    return u, active, StepRecord(step, _tuple(x), _tuple(x_next), bounds, SAFE, active, _tuple(u))


class SwitchedPolicy:
    """Single calibrated model filter."""

    def __init__(self, system, model, alpha, label="switched"):
        self.system = system
        self.model = model
        self.alpha = alpha
        self.label = label
        self._q = model.quantile(alpha)

    def reset(self):
        pass

    def act(self, x, step=0):
        return switched_step(self.system, self.model, self.alpha, x, step=step, quantile=self._q)


class EnsembleSwitchedPolicy:
    """Calibrated ensemble filter with per-episode member bookkeeping."""

    def __init__(self, system, models, alpha, strategy=Strategy.MULTIPLE, label="ensemble"):
        if len(models) == 0:
            raise ContractError("ensemble needs at least one model")
        self.system = system
        self.models = list(models)
        self.alpha = alpha
        self.strategy = Strategy(strategy)
        self.label = label
        self._qs = [m.quantile(alpha) for m in self.models]
        self.active = None

    def reset(self):
        self.active = None

    def act(self, x, step=0):
        u, self.active, rec = ensemble_step(self.system, self.models, self.alpha, self.strategy, x,
                                            self.active, step=step, quantiles=self._qs)
        return u, rec


def run_episode(sys, policy, horizon=None, seed=None, x0=None):
    """Roll ``policy`` until violation, task success or ``horizon`` steps.

    The initial state is ``x0`` if given, otherwise drawn from the system's
    initial distribution with ``seed``. Returns ``(trajectory, trace, outcome)``
    with ``trajectory`` holding ``x_0 .. x_T``.
    """
    horizon = sys.horizon if horizon is None else int(horizon)
    if horizon < 1:
        raise ContractError("horizon must be >= 1")
    x = np.array(sys.sample_initial(np.random.default_rng(seed)) if x0 is None else x0, dtype=float)
    policy.reset()
    traj = [x]
    trace = FilterTrace()
    if not (sys.margin(x) <= 0 or sys.is_success(x)):
        for t in range(horizon):
            u, rec = policy.act(x, step=t)
            trace.append(rec)
            x = sys.dynamics(x, sys.clip_control(u))
            traj.append(x)
            if sys.margin(x) <= 0 or sys.is_success(x):
                break
    traj = np.array(traj)
    return traj, trace, classify(traj, sys, horizon)

