"""Exception hierarchy shared by every module."""


class SpokenAlignError(Exception):
    """Base class for all package errors."""


class ShapeError(SpokenAlignError, ValueError):
    pass


class ParameterError(SpokenAlignError, ValueError):
    pass


class InputError(SpokenAlignError, ValueError):
    pass


class FormatError(SpokenAlignError, ValueError):
    """Malformed file contents. ``offset`` is the byte position, when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(SpokenAlignError, ValueError):
    pass


class ConfigError(SpokenAlignError, ValueError):
    pass


class EvaluationSetupError(SpokenAlignError, ValueError):
    pass
