"""Exception types shared across the package.

The CLI maps these onto exit codes: ``DataError`` -> 2, ``NumericError`` -> 3.
"""


class DataError(ValueError):
    """Invalid or inconsistent input data (bad shapes, malformed files, ...)."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or hit a numerically degenerate case."""


class ShapeError(DataError):
    """Tensor shapes are incompatible for an operation."""
