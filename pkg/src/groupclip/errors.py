"""Exception types raised across the package."""


class GroupClipError(Exception):
    pass


class DimensionError(GroupClipError, ValueError):
    pass


class InputError(GroupClipError, ValueError):
    pass


class StateError(GroupClipError, RuntimeError):
    pass


class NumericError(GroupClipError, ArithmeticError):
    pass


class InfeasibleError(GroupClipError, ValueError):
    pass


class ConfigError(GroupClipError, ValueError):
    pass


class FormatError(GroupClipError, ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
