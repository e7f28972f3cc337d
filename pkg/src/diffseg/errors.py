"""Exception types shared across the package."""


class DiffsegError(Exception):
    """Base class for all package errors."""


class ShapeError(DiffsegError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(DiffsegError):
    """A configuration value or combination of values is invalid."""


class DataError(DiffsegError):
    """Input data violates a contract (non-binary mask, out-of-range value)."""


class FormatError(DiffsegError):
    """A file does not conform to its expected on-disk format."""


class StateError(DiffsegError):
    """An object is in the wrong state for the requested operation."""


class SingularityError(DiffsegError):
    """A computation would divide by a vanishing quantity."""


class IoError(DiffsegError):
    """Reading or writing a file failed."""
