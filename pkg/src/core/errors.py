"""
Exception hierarchy shared by every component.

Numerical non-convergence is reported through result flags, not exceptions.
"""


class SpatialGEEError(Exception):
    """Root of all errors raised by this package."""


class DataValidationError(SpatialGEEError, ValueError):
    """Input data or configuration violates an invariant."""

    def __init__(self, message, column=None):
        self.column = column
        if column is not None:
            message = f"column '{column}': {message}"
        super().__init__(message)


class CsvParseError(SpatialGEEError, ValueError):
    """Malformed CSV input."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EstimationError(SpatialGEEError, RuntimeError):
    """A numerical step could not be carried out."""


class RankDeficiencyError(EstimationError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(
            f"covariate matrix is rank deficient; dependent columns: {self.columns}")


class DivergenceError(EstimationError):
    pass


class SingularMatrixError(EstimationError):
    pass


class BadlyConditionedError(EstimationError):
    pass


class SingularSystemError(EstimationError):
    def __init__(self, rho, condition):
        self.rho = rho
        self.condition = condition
        super().__init__(
            f"SAR system singular or near-singular at rho={rho} (condition estimate {condition:.3e})")


class CorrelationRepairError(EstimationError):
    pass


class NoInformativePairsError(EstimationError):
    pass


class MeanOverflowError(EstimationError):
    def __init__(self, linear_index):
        self.linear_index = float(linear_index)
        super().__init__(f"exponential mean overflows at linear index {self.linear_index:.6g}")
