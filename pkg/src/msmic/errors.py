"""Exception hierarchy shared by every module."""


class MsmicError(Exception):
    """Base class for all package errors."""


class ConfigError(MsmicError, ValueError):
    """Inconsistent dimensions, unsupported family pairings, bad run configs."""


class DataError(MsmicError, ValueError):
    """Input data violates a model invariant (e.g. non-binary outcome)."""


class IngestionError(DataError):
    """A delimited input file could not be turned into a TreatmentFrame."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class NonConvergenceError(MsmicError, RuntimeError):
    """A solver hit its iteration cap or diverged.

    ``result`` carries the last iterate so callers can inspect it.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class RankDeficiencyError(MsmicError, ArithmeticError):
    """Singular Jacobian inside a Newton solve."""

    def __init__(self, message, null_direction=None):
        super().__init__(message)
        self.null_direction = null_direction


class SingularMatrixError(MsmicError, ArithmeticError):
    """A penalty matrix is too ill-conditioned to invert."""

    def __init__(self, name, condition_number):
        super().__init__(
            f"{name} is numerically singular (condition number {condition_number:.3e})"
        )
        self.name = name
        self.condition_number = condition_number


class ExperimentError(MsmicError, RuntimeError):
    """Too many replication-level failures in a Monte Carlo experiment."""
