"""Exception hierarchy shared by the library and the command line."""


class MadaptError(Exception):
    """Base class for every error raised by madapt."""

    exit_code = 1


class ConfigError(MadaptError, ValueError):
    exit_code = 2


class ArgumentError(MadaptError, ValueError):
    exit_code = 2


class StructuralError(ArgumentError):
    """Two parameter stores do not share names or shapes."""


class GenerationError(MadaptError, RuntimeError):
    exit_code = 3


class FormatError(MadaptError):
    """Malformed archive or checkpoint; carries the byte offset of the fault."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(MadaptError):
    exit_code = 3


class EvaluationError(MadaptError):
    exit_code = 4
