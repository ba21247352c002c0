"""Exception hierarchy shared by all modules."""


class CsdaError(Exception):
    """Base class for package errors."""


class DomainError(CsdaError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ShapeError(CsdaError, ValueError):
    """Array dimensions do not match the grid they are meant to live on."""


class HypothesisError(CsdaError):
    """A structural assumption (sign, margin, Schur bound) is violated.

    ``assumption`` names the failing condition so callers can report it.
    """

    def __init__(self, assumption, message):
        super().__init__(f"[{assumption}] {message}")
        self.assumption = assumption


class ConvergenceError(CsdaError):
    """An iteration failed to reach its tolerance; ``history`` holds residuals."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class StaleStateError(CsdaError):
    """Cached forward/adjoint states do not belong to the current control."""
