"""Exception hierarchy shared by every module."""


class DocShadowError(Exception):
    """Base class for all package errors."""


class ShapeError(DocShadowError, ValueError):
    pass


class NumericError(DocShadowError, ArithmeticError):
    pass


class ConfigError(DocShadowError, ValueError):
    pass


class DataError(DocShadowError, IOError):
    """Unreadable or invalid dataset files."""

    def __init__(self, message, files=()):
        self.files = list(files)
        if self.files:
            message = f"{message}: {', '.join(map(str, self.files))}"
        super().__init__(message)


class CheckpointError(DocShadowError, ValueError):
    """Malformed checkpoint; ``offset`` is the byte position where parsing stopped."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
