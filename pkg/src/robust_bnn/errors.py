"""Exception hierarchy shared by every module."""


class RobustBNNError(Exception):
    """Base class for all library errors."""


class UsageError(RobustBNNError, ValueError):
    """A caller violated a precondition (bad argument, wrong mode, empty input)."""


class DimensionError(UsageError):
    """Operand shapes do not agree."""


class NumericError(RobustBNNError, ArithmeticError):
    """A computation produced or received a non-finite value."""


class NonFiniteLossError(NumericError):
    """Raised by a training step whose loss is not finite; the step is not applied."""


class FormatError(RobustBNNError, ValueError):
    """A binary file does not match its declared format.

    ``offset`` is the byte position at which the problem was detected.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(UsageError):
    """Invalid configuration; ``field`` names the offending ``section.key``."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
