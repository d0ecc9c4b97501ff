"""Name-based construction of the bundled systems (used by configs and artifacts)."""

from .dynamics import DoubleIntegrator, DubinsCar
from .exceptions import ConfigurationError
from .highway import HighwayConfig, HighwaySystem


def _highway(**params):
    params = {k: tuple(v) if isinstance(v, list) else v for k, v in params.items()}
    return HighwaySystem(HighwayConfig(**params))


SYSTEMS = {
    "double_integrator": DoubleIntegrator,
    "dubins": DubinsCar,
    "highway": _highway,
}


def make_system(name, params=None):
    """Build a system from its registry name and constructor parameters."""
    try:
        factory = SYSTEMS[name]
    except KeyError:
        raise ConfigurationError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None
    try:
        return factory(**(params or {}))
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for system {name!r}: {exc}") from exc


def system_spec(sys):
    return {"name": sys.name, "params": sys.params()}
