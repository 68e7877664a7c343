"""Exception types shared across the package."""


class QpropError(Exception):
    """Base class for all package errors."""


class DomainError(QpropError, ValueError):
    """An argument lies outside the domain of the operation."""


class SingularityError(DomainError):
    """The requested quantity diverges at the given argument."""


class ConvergenceError(QpropError, RuntimeError):
    """An iterative solver failed to converge.

    The last iterate is kept on ``last`` so callers can inspect how far
    the solver got.
    """

    def __init__(self, message, last=None, iterations=None):
        super().__init__(message)
        self.last = last
        self.iterations = iterations


class EstimationError(QpropError, RuntimeError):
    """A statistical estimate is undefined for the supplied data."""


class FitError(QpropError, RuntimeError):
    """A regression problem is degenerate."""


class ResourceError(QpropError, MemoryError):
    """A request would exceed the configured memory budget."""

    def __init__(self, message, required_bytes=None):
        super().__init__(message)
        self.required_bytes = required_bytes


class IngestionError(QpropError, ValueError):
    """An input file could not be parsed."""
