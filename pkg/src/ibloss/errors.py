class ValidationError(ValueError):
    """Bad input: shapes, ranges, malformed files or configs."""


class NumericalError(ArithmeticError):
    """A computation failed to converge or produced non-finite values."""
