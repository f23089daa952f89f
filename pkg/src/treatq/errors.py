"""Exception types shared across the package."""


class DataError(ValueError):
    """An input stream, dataset, or model input violates its contract."""


class InsufficientDataError(DataError):
    """Not enough (distinct) observations to fit the requested structure."""


class NumericError(RuntimeError):
    """A numeric procedure failed (rank deficiency, non-convergence)."""


class ConvergenceError(NumericError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual
