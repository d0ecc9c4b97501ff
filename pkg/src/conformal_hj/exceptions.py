"""Exception and warning types shared across the package."""


class ContractError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class ConfigurationError(ValueError):
    """Raised for invalid system, grid or run configuration."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative procedure fails to converge."""


class TrainingError(RuntimeError):
    """Raised when value-function training diverges."""


class ArtifactError(RuntimeError):
    pass


class UnsupportedVersionError(ArtifactError):
    pass


class IntegrityError(ArtifactError):
    pass


class ResolutionError(ArtifactError):
    """Raised when a command cannot find the artifacts it depends on."""


class ControlClampWarning(UserWarning):
    """Emitted when a control outside the declared bounds is clamped."""
