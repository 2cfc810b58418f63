"""Exception hierarchy shared by all modules."""


class ElderError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ElderError, ValueError):
    pass


class ConfigError(ElderError, ValueError):
    pass


class FormatError(ElderError, ValueError):
    pass


class UnsupportedPrimitiveError(ElderError, TypeError):
    pass


class NumericError(ElderError, ArithmeticError):
    """Non-finite values or an iterative method that failed to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ContractionError(NumericError):
    """Neumann iteration diverged: the fixed-point map is not contractive."""


class StepFailure(NumericError):
    """Backtracking ran out of trials without meeting sufficient decrease.

    ``candidate`` holds the last trial point and ``gamma`` its step size.
    """

    def __init__(self, message, candidate=None, gamma=None):
        super().__init__(message)
        self.candidate = candidate
        self.gamma = gamma
