"""Exception types shared across the package."""


class GatePoseError(Exception):
    """Base class for every error this package raises deliberately."""


class ShapeError(GatePoseError, ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


class ConfigError(GatePoseError, ValueError):
    """Raised when a configuration value is invalid or inconsistent."""


class StateError(GatePoseError, RuntimeError):
    """Raised on illegal state transitions, e.g. backward through a
    graph that was already consumed."""


class FormatError(GatePoseError, ValueError):
    """Raised when a serialized file does not parse or does not match
    the expected model layout."""


class TrainingDiverged(GatePoseError, RuntimeError):
    """Raised when the training loss becomes NaN or Inf."""
