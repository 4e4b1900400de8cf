class ShapeError(ValueError):
    """Array dimensions do not match what an operation expects."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class StateError(RuntimeError):
    """An object was used before it reached the required state."""
