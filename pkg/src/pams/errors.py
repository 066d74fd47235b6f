"""Exception types shared across the package."""


class PamsError(Exception):
    """Base class for all package errors."""


class DimensionError(PamsError, ValueError):
    """Shapes of the operands are incompatible."""


class NumericError(PamsError, ArithmeticError):
    """A NaN or Inf appeared in a forward or backward value."""


class StateError(PamsError, RuntimeError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class ParameterError(PamsError, ValueError):
    """An argument is outside its valid domain."""


class TrainingError(PamsError, RuntimeError):
    """Training diverged; the message names the first offending layer."""
