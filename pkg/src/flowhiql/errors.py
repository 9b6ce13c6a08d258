"""Exception hierarchy shared across the package.

Each class maps to a distinct CLI exit code (see ``flowhiql.cli``).
"""


class FlowHiqlError(Exception):
    exit_code = 1


class ConfigError(FlowHiqlError, ValueError):
    """Mismatched dimensions, layouts, or invalid configuration values."""

    exit_code = 2


class ArgumentError(FlowHiqlError, ValueError):
    """A call argument is outside its documented domain."""

    exit_code = 2


class DatasetError(FlowHiqlError):
    """Empty or malformed offline dataset."""

    exit_code = 3


class CheckpointError(FlowHiqlError):
    """Unreadable, truncated or corrupted checkpoint/dataset file."""

    exit_code = 3


class NumericError(FlowHiqlError, ArithmeticError):
    """A non-finite value appeared. ``segment`` names the parameter segment if known."""

    exit_code = 4

    def __init__(self, message, segment=None):
        super().__init__(message if segment is None else f"{message} (segment {segment!r})")
        self.segment = segment


class VerificationError(FlowHiqlError):
    """A certified bound check failed."""

    exit_code = 5
