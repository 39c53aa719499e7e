"""Generative longitudinal brain segmentation on tetrahedral mesh atlases."""

from .errors import (
    InputError,
    LongsegError,
    NumericalError,
    StateError,
)

__version__ = "0.1.0"

__all__ = ["InputError", "LongsegError", "NumericalError", "StateError", "__version__"]
