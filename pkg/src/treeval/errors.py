"""Exception types shared across the package."""


class TreevalError(Exception):
    """Base class for all treeval errors."""


class ValidationError(TreevalError):
    """Malformed input data: trees, balances, files, parameters."""


class DomainError(TreevalError):
    """Argument outside the mathematical domain of an operator."""


class ConvergenceError(TreevalError):
    """Iteration budget exhausted before reaching tolerance.

    Carries the best iterate found so callers can inspect or resume.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DivergenceError(TreevalError):
    """Unbounded optimization detected; carries the ascent direction as certificate."""

    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction
