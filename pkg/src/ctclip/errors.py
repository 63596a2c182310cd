"""Exception types shared across the package."""


class CTClipError(Exception):
    """Base class for every error raised by ctclip."""


class ShapeError(CTClipError, ValueError):
    pass


class ConfigError(CTClipError, ValueError):
    pass


class DataError(CTClipError, ValueError):
    pass


class FormatError(CTClipError, ValueError):
    """Raised when a checkpoint or image file fails validation.

    ``check`` names the failing check (``magic``, ``version``, ``length``, ``crc``...).
    """

    def __init__(self, check, message):
        super().__init__(f"{check}: {message}")
        self.check = check


class StateError(CTClipError, RuntimeError):
    pass
