"""Exception hierarchy shared by all modules."""


class ScorePriorError(Exception):
    """Base class for library errors."""


class DomainError(ScorePriorError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ShapeError(ScorePriorError, ValueError):
    """Array dimensions do not agree."""


class ConfigError(ScorePriorError, ValueError):
    """Invalid or contradictory configuration."""


class NumericalError(ScorePriorError, ArithmeticError):
    """A computation produced non-finite values."""


class NoConvergenceError(ScorePriorError, RuntimeError):
    """An iterative solver gave up before reaching its target.

    ``partial`` carries whatever state was reached (time, state vector,
    counters) so callers can inspect how far the solve got.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class DivergedError(ScorePriorError, RuntimeError):
    """Training or sampling blew up (non-finite loss or state)."""

    def __init__(self, message, level=None):
        super().__init__(message)
        self.level = level
