"""Exception hierarchy shared across the library.

Everything derived from :class:`NumericsError` maps to the CLI's
"numerical failure" exit code; :class:`ConfigError` maps to the
configuration exit code.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class NumericsError(RuntimeError):
    """Base class for numerical failures that should abort a run."""


class CovarianceFloorError(NumericsError):
    """A covariance lost positive definiteness below the SPD floor."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class RiccatiBlowupError(NumericsError):
    """A Riccati path entry exceeded the configured blow-up bound."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class ConditioningError(NumericsError):
    """A closed-form evaluation hit a numerically singular matrix."""


class ExtinctionError(NumericsError):
    """A branching population died out before a requested snapshot."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class NonFiniteError(NumericsError):
    """A NaN or infinity appeared where a finite value is required."""


class NonFiniteGradientError(NonFiniteError):
    """An optimiser step was rejected because a gradient was not finite."""
