"""Boundary-aware joint 3D image+mask synthesis via rectified flow matching.

Desk-scale, self-contained: procedural phantom data, a small 3D KL-VAE,
a spatially constrained vector-field estimator, few-step Euler sampling,
and a VAE-feature-guided mask refiner, with a training/evaluation CLI.
"""

from .kernels import BACKEND as kernel_backend
from .tensor import Tensor

__version__ = "0.1.0"
__all__ = ["Tensor", "kernel_backend", "__version__"]
