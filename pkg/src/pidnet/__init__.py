"""Three-branch segmentation network and PID-controller analysis toolkit."""

from .tensor import (
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    default_dtype,
    precision,
    set_default_dtype,
)

__all__ = [
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "backward",
    "default_dtype",
    "precision",
    "set_default_dtype",
]

__version__ = "0.1.0"
