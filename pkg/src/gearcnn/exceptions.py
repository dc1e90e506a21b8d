"""Exception types raised across the package."""


class GearCNNError(Exception):
    """Base class for all package errors."""


class ShapeError(GearCNNError, ValueError):
    pass


class ConfigurationError(GearCNNError, ValueError):
    pass


class DegenerateBatchError(GearCNNError, ValueError):
    pass


class LabelError(GearCNNError, ValueError):
    pass


class UsageError(GearCNNError, RuntimeError):
    pass


class NumericalError(GearCNNError, ArithmeticError):
    pass


class FormatError(GearCNNError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ParseError(GearCNNError, ValueError):
    """Malformed text input. ``row`` is the 1-based line number."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row
