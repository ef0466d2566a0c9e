"""Backend selection for the hot convolution kernels.

The compiled Cython extension is used when importable and more than one
CPU is available (its loops parallelize across cores); otherwise the
pure-NumPy implementation in :mod:`flowsynth.kernels.reference` is used.
Set ``FLOWSYNTH_BACKEND=python`` or ``FLOWSYNTH_BACKEND=compiled`` to force
one, and ``FLOWSYNTH_THREADS`` to cap the compiled backend's parallelism.
"""

import os

import numpy as np

from . import reference

try:
    from . import _compiled
except ImportError:
    _compiled = None

_forced = os.environ.get("FLOWSYNTH_BACKEND", "").strip().lower()
if _forced == "python":
    _compiled = None
elif _forced == "compiled":
    if _compiled is None:
        raise ImportError(
            "FLOWSYNTH_BACKEND=compiled but the extension is not built")
elif (os.cpu_count() or 1) < 2:
    # the compiled kernels win by parallelizing across cores; on a single
    # core the BLAS-backed im2col path is faster (see benchmarks/)
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"


def _threads():
    val = os.environ.get("FLOWSYNTH_THREADS", "")
    try:
        n = int(val)
    except ValueError:
        n = 0
    if n < 1:
        n = os.cpu_count() or 1
    return n


def _f32(a):
    return np.ascontiguousarray(a, dtype=np.float32)


def conv3d_forward(x, w, b, stride, pad):
    if _compiled is not None:
        bb = None if b is None else np.asarray(b, dtype=np.float64)
        return _compiled.conv3d_forward(_f32(x), _f32(w), bb,
                                        stride, pad, _threads())
    return reference.conv3d_forward(x, w, b, stride, pad)


def conv3d_grad_weight(x, gout, stride, pad, k):
    if _compiled is not None:
        return _compiled.conv3d_grad_weight(_f32(x), _f32(gout),
                                            stride, pad, k, _threads())
    return reference.conv3d_grad_weight(x, gout, stride, pad, k)


def conv3d_grad_input(gout, w, stride, pad, in_spatial):
    if _compiled is not None:
        return _compiled.conv3d_grad_input(_f32(gout), _f32(w), stride, pad,
                                           tuple(in_spatial), _threads())
    return reference.conv3d_grad_input(gout, w, stride, pad, in_spatial)
