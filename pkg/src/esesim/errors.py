"""Exception hierarchy shared by every stage.

The CLI maps each class to an exit code: I/O problems exit 2, validation
problems exit 3 and numeric problems exit 4.
"""


class EseError(Exception):
    exit_code = 1


class ContainerIOError(EseError, OSError):
    """A file is missing, unreadable or shorter than its manifest claims."""

    exit_code = 2


class ValidationError(EseError, ValueError):
    exit_code = 3


class ShapeError(ValidationError):
    pass


class ChecksumError(ValidationError):
    pass


class CorruptionError(ValidationError):
    """An encoded stream violates its structural invariants."""


class ScheduleError(ValidationError):
    pass


class StaleInputError(ValidationError):
    """A pipeline stage was run against an input that no longer matches the record."""


class NumericError(EseError, ArithmeticError):
    exit_code = 4


class FormatOverflowError(NumericError):
    """A value range cannot be represented in the requested fixed-point width."""
