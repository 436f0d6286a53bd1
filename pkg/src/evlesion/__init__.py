"""Uncertainty-aware lesion detection on anisotropic volumes.

A self-contained stack: float64 autodiff engine, global-local cross-slice
attention, evidential (Dirichlet) heads and losses, a 2.5D encoder-decoder,
a synthetic anisotropic volume generator, and FROC / calibration evaluation
with CSV and figure reports.
"""

from .tensor import Tensor, backward, Adam, ShapeError, NumericalError

__all__ = ["Tensor", "backward", "Adam", "ShapeError", "NumericalError"]
__version__ = "0.1.0"
