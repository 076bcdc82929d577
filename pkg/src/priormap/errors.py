"""Exception types shared across the package."""


class PriorMapError(Exception):
    """Base class for all package errors."""


class ShapeError(PriorMapError, ValueError):
    """Operand shapes do not agree."""


class DataError(PriorMapError):
    """Input data is malformed or inconsistent."""


class NumericError(PriorMapError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class StageError(PriorMapError):
    """A pipeline stage is missing a prerequisite artifact."""
