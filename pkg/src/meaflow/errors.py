"""Exception types shared across the package."""


class MeaflowError(Exception):
    """Base class for package errors."""


class ConfigurationError(MeaflowError, ValueError):
    """Invalid or inconsistent configuration."""


class DimensionError(MeaflowError, ValueError):
    """Array shapes or ambient dimensions do not match."""


class UnsupportedConfigurationError(MeaflowError, ValueError):
    """A valid request this implementation deliberately does not handle."""


class NonDifferentiableError(MeaflowError, ArithmeticError):
    """A derivative was requested at a point where the feature map has none."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class IntegrationError(MeaflowError, RuntimeError):
    """A flow step could not be taken (for instance at a kink of the feature map)."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DivergedError(MeaflowError, RuntimeError):
    """Energy became NaN/Inf, or the solver could not find a stable step."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class InfeasibleSeparationError(MeaflowError, RuntimeError):
    """Rejection sampling could not place well-separated spikes."""
