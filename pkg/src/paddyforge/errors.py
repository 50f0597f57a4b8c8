"""Exception types shared across the engine."""


class PaddyError(Exception):
    """Base class for all engine errors."""


class ShapeError(PaddyError, ValueError):
    pass


class ConfigError(PaddyError, ValueError):
    pass


class NumericError(PaddyError, ArithmeticError):
    pass


class FormatError(PaddyError, ValueError):
    """Malformed file contents. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class LoadError(PaddyError, OSError):
    pass


class SplitError(PaddyError, ValueError):
    pass


class NoValleyError(PaddyError, ValueError):
    pass
