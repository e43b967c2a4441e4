"""Joint part-detector and spatial-model pose estimation on numpy."""

from .tensor import Tensor, TensorError, argmax2d, elementwise

__all__ = ["Tensor", "TensorError", "argmax2d", "elementwise"]
__version__ = "0.1.0"
