"""Exception types raised across the package."""


class HdpHmmError(Exception):
    """Base class for all package errors."""


class ValidationError(HdpHmmError, ValueError):
    """Input or configuration failed validation."""


class ParseError(ValidationError):
    def __init__(self, row, col, message="invalid value"):
        self.row = row
        self.col = col
        super().__init__(f"row {row}, column {col}: {message}")


class EmptyData(ValidationError):
    pass


class InvalidWindow(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class RangeError(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class DomainError(ValidationError):
    """A distribution was called outside its support or parameter domain."""


class NumericalError(HdpHmmError, ArithmeticError):
    """Non-finite value where a finite one is required."""


class DegenerateData(HdpHmmError, UserWarning):
    """Issued as a warning; the operation continues with a fallback."""


class LineSearchStall(HdpHmmError, UserWarning):
    """Issued as a warning; the operation continues with a fallback."""


class MonotonicityViolation(NumericalError):
    pass


class ZeroRateWithSpikes(HdpHmmError, UserWarning):
    """Issued as a warning; the operation continues with a fallback."""


class NoSpikes(ValidationError):
    pass


class UncoveredState(ValidationError):
    pass
