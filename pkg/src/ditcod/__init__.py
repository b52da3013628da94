"""Dual-task interactive transformer for camouflaged object detection, in numpy."""

from .tensor import NumericalError, ShapeError, Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "ShapeError", "NumericalError", "no_grad", "__version__"]
