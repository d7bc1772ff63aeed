"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the domain where an operation is defined."""


class ConvergenceError(RuntimeError):
    """An iterative method stopped before meeting its tolerance.

    ``residuals`` holds whatever per-item residuals were achieved and
    ``last_time`` the last accepted time for propagators (None otherwise).
    """

    def __init__(self, message, residuals=None, last_time=None):
        super().__init__(message)
        self.residuals = residuals
        self.last_time = last_time


class AmbiguousAssignmentError(RuntimeError):
    """Two dressed eigenvectors claim the same unperturbed state."""

    def __init__(self, message, contested=()):
        super().__init__(message)
        self.contested = list(contested)
