"""Exception hierarchy shared by all modules."""


class EDRoughError(Exception):
    """Base class for every error raised by the package."""


class DomainError(EDRoughError, ValueError):
    """An argument lies outside the domain where an operation is defined."""


class EvaluationError(EDRoughError, ArithmeticError):
    """A coefficient, kernel or perturbation produced non-finite values."""


class InvertibilityError(EDRoughError, ArithmeticError):
    """The restriction of a flow to the unstable bundle is numerically singular."""


class NoDichotomyError(EDRoughError):
    """No constants with a positive exponent fit the sampled envelope.

    This is a verdict about the data, not a crash; ``details`` carries the
    best fit that was found.
    """

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


class DivergenceError(EDRoughError, ArithmeticError):
    """A truncated integral has a tail that cannot be bounded."""


class NonConvergenceError(EDRoughError):
    """A fixed-point iteration hit its iteration cap before reaching tolerance."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class PreconditionError(EDRoughError):
    """The smallness condition required for a contraction does not hold."""


class TruncationError(EDRoughError):
    """Neglected kernel mass beyond a truncation window exceeds tolerance."""


class ConfigError(EDRoughError):
    """A run configuration is unreadable or violates its invariants."""
