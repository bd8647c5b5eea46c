"""Exception types shared across the package.

The CLI maps these onto its exit-code contract (0 ok, 2 config,
3 input data, 4 numeric failure).
"""


class ApiqError(Exception):
    """Base class for all package errors."""


class ShapeError(ApiqError, ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ApiqError, ValueError):
    """Invalid configuration (bad key, bad value, bad divisibility)."""


class InputError(ApiqError, ValueError):
    """Invalid input data (corpus too short, token out of vocab, ...)."""


class FormatError(ApiqError, ValueError):
    """Malformed serialized data. Carries a byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StateError(ApiqError, RuntimeError):
    """Operation invoked in an invalid order (e.g. backward twice)."""


class NumericError(ApiqError, ArithmeticError):
    """Non-finite values or failed numeric iteration."""
