"""Shared exception types."""


class InputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite or unusable results."""
