"""Exception types raised across the package."""


class IsingPruneError(Exception):
    """Base class for all package errors."""


class DimensionError(IsingPruneError, ValueError):
    """Tensor shapes are incompatible for an operation."""


class InputError(IsingPruneError, ValueError):
    """An argument violates an operation's precondition."""


class UsageError(IsingPruneError, RuntimeError):
    """An API was called in an invalid order or context."""


class StructuralError(IsingPruneError):
    """A network cannot be built or pruned into a valid structure."""


class NumericalError(IsingPruneError, ArithmeticError):
    """A numerical routine failed (non-PD matrix, NaN loss, ...)."""


class ConsistencyError(IsingPruneError):
    """Two pieces of state that must agree do not."""


class ConfigError(IsingPruneError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class ParseError(IsingPruneError, ValueError):
    """A binary or text file could not be parsed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
