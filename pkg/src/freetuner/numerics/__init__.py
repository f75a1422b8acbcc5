"""Float64 tensor math with reverse-mode differentiation."""
from . import ops
from .linalg import pca_components, pca_project
from .ops import (SIGMA_EPS, adain, bilinear_resize, channel_stats, conv2d,
                  softmax_rows)
from .rng import Rng
from .tensor import (Gradients, Tensor, as_tensor, backward, enable_grad, grad,
                     grad_enabled, no_grad)

__all__ = [
    "ops", "Tensor", "Gradients", "Rng", "as_tensor", "grad", "backward",
    "no_grad", "enable_grad", "grad_enabled", "softmax_rows", "bilinear_resize",
    "channel_stats", "adain", "conv2d", "pca_project", "pca_components",
    "SIGMA_EPS",
]
