"""Exceptions raised by agscl."""


class AgsclException(Exception):
    """Base class for all agscl errors."""

    pass


class ConfigurationError(AgsclException):
    """Exception for invalid model, task or experiment configuration."""

    pass


class DataError(AgsclException):
    """Exception for unusable input data."""

    pass


class IdxFormatError(DataError):
    """Exception for malformed IDX files."""

    pass


class NumericError(AgsclException):
    """Exception for non-finite values encountered during training."""

    pass


class CheckpointError(AgsclException):
    """Exception for unreadable or corrupted checkpoints."""

    pass


class CheckpointVersionError(CheckpointError):
    """Exception for checkpoints written by an incompatible format version."""

    pass
