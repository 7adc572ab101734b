"""voxbag: 3D bag-of-local-features networks on a self-contained CPU engine."""

from .errors import (
    ConfigError,
    DataError,
    DegenerateStatsError,
    FormatError,
    NumericsError,
    ShapeError,
    UnsupportedError,
    VoxbagError,
)
from .tensor import Tape, Tensor, backward, grad_check, tensor

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "tensor",
    "VoxbagError",
    "ShapeError",
    "ConfigError",
    "DataError",
    "FormatError",
    "UnsupportedError",
    "NumericsError",
    "DegenerateStatsError",
    "__version__",
]
