"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericalError -> 4.
"""


class MultitreatError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MultitreatError):
    """Invalid configuration: unknown option, bad schema, missing file."""


class DataError(MultitreatError):
    """Invalid or inconsistent data: bad cells, lost treatment levels, empty cells."""


class NumericalError(MultitreatError):
    """Numerical failure: non-convergence, separation, singular matrices."""


class ConvergenceError(NumericalError):
    """Model fit did not converge within the iteration budget.

    Carries the last iterate and its gradient norm so callers can inspect
    how close the fit got.
    """

    def __init__(self, message, coefficients=None, gradient_norm=None, iterations=None):
        super().__init__(message)
        self.coefficients = coefficients
        self.gradient_norm = gradient_norm
        self.iterations = iterations


class SeparationError(NumericalError):
    """Complete or quasi-complete separation detected while fitting."""


class EmptyCellError(DataError):
    """A subclass/treatment cell required by an estimator contains no units."""

    def __init__(self, message, cells=None):
        super().__init__(message)
        self.cells = cells or []
