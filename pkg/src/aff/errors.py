"""Exception hierarchy shared across the package."""


class AFFError(Exception):
    """Base class for all package errors."""


class DimensionError(AFFError, ValueError):
    pass


class DegenerateInputError(AFFError, ValueError):
    pass


class ConfigError(AFFError, ValueError):
    pass


class SchemaError(AFFError, ValueError):
    pass


class StateError(AFFError, RuntimeError):
    pass


class TrainingError(AFFError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"epoch {epoch}: {message}")
        self.epoch = epoch


class FormatError(AFFError, ValueError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")
        self.offset = offset


class ChecksumError(FormatError):
    pass
