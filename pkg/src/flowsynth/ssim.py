"""Differentiable 3D SSIM with a uniform cubic window.

Local statistics come from valid-mode box filtering (a fixed-weight
convolution), so gradients flow through both inputs. Constants follow
the usual C1=(0.01 L)^2, C2=(0.03 L)^2 with dynamic range L.
"""

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def _box_mean(x, window):
    # per-channel box filter: fold channels into the batch axis
    n, c, d, h, w = x.shape
    flat = T.reshape(x, (n * c, 1, d, h, w))
    kernel = Tensor(np.full((1, 1, window, window, window),
                            1.0 / window ** 3, dtype=np.float32))
    out = T.conv3d(flat, kernel, None, 1, 0)
    od, oh, ow = out.shape[2:]
    return T.reshape(out, (n, c, od, oh, ow))


def ssim3d(a, b, window=3, dynamic_range=1.0):
    """Mean local SSIM of two (N,C,D,H,W) tensors; in [-1, 1]."""
    if a.shape != b.shape:
        raise ShapeError("ssim3d operands differ: %s vs %s"
                         % (a.shape, b.shape))
    if window % 2 == 0 or window > min(a.shape[2:]):
        raise ShapeError("window %d invalid for spatial dims %s"
                         % (window, a.shape[2:]))
    c1 = Tensor((0.01 * dynamic_range) ** 2)
    c2 = Tensor((0.03 * dynamic_range) ** 2)
    two = Tensor(2.0)
    mu_a = _box_mean(a, window)
    mu_b = _box_mean(b, window)
    var_a = _box_mean(a * a, window) - mu_a * mu_a
    var_b = _box_mean(b * b, window) - mu_b * mu_b
    cov = _box_mean(a * b, window) - mu_a * mu_b
    num = (two * mu_a * mu_b + c1) * (two * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return T.tmean(num / den)
