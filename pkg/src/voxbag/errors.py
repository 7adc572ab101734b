"""Exception types shared across the package."""


class VoxbagError(Exception):
    """Base class for all voxbag errors."""


class ShapeError(VoxbagError):
    """Tensor shapes do not conform to an operation's contract."""


class ConfigError(VoxbagError):
    """Invalid configuration value or misuse of an API."""


class DataError(VoxbagError):
    """Bad input data (labels, masks, dataset sizes, ...)."""


class FormatError(DataError):
    """Malformed or truncated file content."""


class UnsupportedError(DataError):
    """File is well-formed but uses a feature we do not support."""


class NumericsError(VoxbagError):
    """Non-finite values encountered where finite ones are required."""


class DegenerateStatsError(DataError):
    """Statistics (e.g. whitening std) are degenerate for the given data."""
