"""Exception types shared across the package."""


class ICMError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ICMError, ValueError):
    pass


class BitstreamError(ICMError):
    pass


class ChecksumError(BitstreamError):
    pass


class ModelMismatchError(BitstreamError):
    pass


class TruncatedStreamError(BitstreamError):
    pass


class TrainingDivergedError(ICMError, RuntimeError):
    """Raised when a loss becomes non-finite. ``dump_path`` points at the state dump."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class DatasetError(ICMError):
    pass
