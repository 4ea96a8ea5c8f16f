"""Exception types shared across the package."""


class PromptCtlError(Exception):
    """Base class for domain errors (mapped to exit status 1 by the CLI)."""


class ShapeError(PromptCtlError, ValueError):
    """Operand shapes are inconsistent."""


class NumericError(PromptCtlError, ArithmeticError):
    """An iterative routine failed to converge or produced non-finite values."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class ArgumentError(PromptCtlError, ValueError):
    """An argument is outside the operation's domain."""


class CapabilityError(PromptCtlError, TypeError):
    """The supplied language model lacks a required capability."""
