"""Desk-scale vision-language transformer for referring segmentation.

The package bundles a small float64 autodiff engine, reusable neural
blocks, the query-based vision-language segmentation model, a synthetic
shapes-and-expressions benchmark, and a training/evaluation harness with
a command-line front end.
"""

from .prng import Prng
from .tensor import Tensor, backward

__all__ = ["Prng", "Tensor", "backward"]
__version__ = "0.1.0"
