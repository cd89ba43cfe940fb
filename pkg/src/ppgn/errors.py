"""Exception types shared across the package.

CLI exit codes: InvalidInputError (and subclasses) map to 2, OSError to 3,
NumericFailure to 4.
"""


class PpgnError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(PpgnError):
    """An argument violates a documented precondition."""


class ShapeError(InvalidInputError):
    """Tensor shapes are incompatible for the requested operation."""


class DegenerateInputError(InvalidInputError):
    """Input is structurally valid but numerically degenerate (e.g. all-zero)."""


class ConsistencyError(PpgnError):
    """Internal state disagrees with itself; indicates a bug or corrupt file."""


class NumericFailure(PpgnError):
    """A numeric computation produced NaN/Inf where finite values are required."""
