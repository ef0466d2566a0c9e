# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3D convolution kernels.

Direct loops with float64 accumulators; parallelized over independent
output slabs so results are bit-identical for any thread count.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()


def conv3d_forward(cnp.ndarray[cnp.float32_t, ndim=5] x,
                   cnp.ndarray[cnp.float32_t, ndim=5] w,
                   b, int stride, int pad, int threads):
    cdef int n = x.shape[0], c = x.shape[1]
    cdef int d = x.shape[2], h = x.shape[3], wi = x.shape[4]
    cdef int o = w.shape[0], k = w.shape[2]
    cdef int od = (d + 2 * pad - k) // stride + 1
    cdef int oh = (h + 2 * pad - k) // stride + 1
    cdef int ow = (wi + 2 * pad - k) // stride + 1
    out_arr = np.empty((n, o, od, oh, ow), dtype=np.float32)
    cdef cnp.float32_t[:, :, :, :, ::1] out = out_arr
    cdef cnp.float32_t[:, :, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef cnp.float32_t[:, :, :, :, ::1] wv = np.ascontiguousarray(w)
    cdef cnp.float64_t[::1] bv
    cdef bint has_b = b is not None
    if has_b:
        bv = np.ascontiguousarray(b, dtype=np.float64)
    else:
        bv = np.zeros(o, dtype=np.float64)
    cdef Py_ssize_t idx, ni, oi, zi, yi, xi, ci, kz, ky, kx, iz, iy, ix
    cdef double acc
    cdef Py_ssize_t total = n * o
    for idx in prange(total, nogil=True, schedule='static',
                      num_threads=threads):
        ni = idx // o
        oi = idx % o
        for zi in range(od):
            for yi in range(oh):
                for xi in range(ow):
                    acc = bv[oi]
                    for ci in range(c):
                        for kz in range(k):
                            iz = zi * stride + kz - pad
                            if iz < 0 or iz >= d:
                                continue
                            for ky in range(k):
                                iy = yi * stride + ky - pad
                                if iy < 0 or iy >= h:
                                    continue
                                for kx in range(k):
                                    ix = xi * stride + kx - pad
                                    if ix < 0 or ix >= wi:
                                        continue
                                    acc = acc + (<double>xv[ni, ci, iz, iy, ix]
                                                 * <double>wv[oi, ci, kz, ky, kx])
                    out[ni, oi, zi, yi, xi] = <float>acc
    return out_arr


def conv3d_grad_weight(cnp.ndarray[cnp.float32_t, ndim=5] x,
                       cnp.ndarray[cnp.float32_t, ndim=5] gout,
                       int stride, int pad, int k, int threads):
    cdef int n = x.shape[0], c = x.shape[1]
    cdef int d = x.shape[2], h = x.shape[3], wi = x.shape[4]
    cdef int o = gout.shape[1]
    cdef int od = gout.shape[2], oh = gout.shape[3], ow = gout.shape[4]
    gw_arr = np.empty((o, c, k, k, k), dtype=np.float32)
    cdef cnp.float32_t[:, :, :, :, ::1] gw = gw_arr
    cdef cnp.float32_t[:, :, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef cnp.float32_t[:, :, :, :, ::1] gv = np.ascontiguousarray(gout)
    cdef Py_ssize_t oi, ci, kz, ky, kx, ni, zi, yi, xi, iz, iy, ix
    cdef double acc
    for oi in prange(o, nogil=True, schedule='static', num_threads=threads):
        for ci in range(c):
            for kz in range(k):
                for ky in range(k):
                    for kx in range(k):
                        acc = 0.0
                        for ni in range(n):
                            for zi in range(od):
                                iz = zi * stride + kz - pad
                                if iz < 0 or iz >= d:
                                    continue
                                for yi in range(oh):
                                    iy = yi * stride + ky - pad
                                    if iy < 0 or iy >= h:
                                        continue
                                    for xi in range(ow):
                                        ix = xi * stride + kx - pad
                                        if ix < 0 or ix >= wi:
                                            continue
                                        acc = acc + (<double>gv[ni, oi, zi, yi, xi]
                                                     * <double>xv[ni, ci, iz, iy, ix])
                        gw[oi, ci, kz, ky, kx] = <float>acc
    return gw_arr


def conv3d_grad_input(cnp.ndarray[cnp.float32_t, ndim=5] gout,
                      cnp.ndarray[cnp.float32_t, ndim=5] w,
                      int stride, int pad, in_spatial, int threads):
    cdef int n = gout.shape[0], o = gout.shape[1]
    cdef int od = gout.shape[2], oh = gout.shape[3], ow = gout.shape[4]
    cdef int c = w.shape[1], k = w.shape[2]
    cdef int d = in_spatial[0], h = in_spatial[1], wi = in_spatial[2]
    gx_arr = np.empty((n, c, d, h, wi), dtype=np.float32)
    cdef cnp.float32_t[:, :, :, :, ::1] gx = gx_arr
    cdef cnp.float32_t[:, :, :, :, ::1] gv = np.ascontiguousarray(gout)
    cdef cnp.float32_t[:, :, :, :, ::1] wv = np.ascontiguousarray(w)
    cdef Py_ssize_t idx, ni, ci, iz, iy, ix, oi, kz, ky, kx
    cdef Py_ssize_t zi, yi, xi, tz, ty, tx
    cdef double acc
    cdef Py_ssize_t total = n * c
    # gather form: gx[iz] = sum over (kz, zi) with zi*stride + kz - pad == iz
    for idx in prange(total, nogil=True, schedule='static',
                      num_threads=threads):
        ni = idx // c
        ci = idx % c
        for iz in range(d):
            for iy in range(h):
                for ix in range(wi):
                    acc = 0.0
                    for kz in range(k):
                        tz = iz + pad - kz
                        if tz < 0 or tz % stride != 0:
                            continue
                        zi = tz // stride
                        if zi >= od:
                            continue
                        for ky in range(k):
                            ty = iy + pad - ky
                            if ty < 0 or ty % stride != 0:
                                continue
                            yi = ty // stride
                            if yi >= oh:
                                continue
                            for kx in range(k):
                                tx = ix + pad - kx
                                if tx < 0 or tx % stride != 0:
                                    continue
                                xi = tx // stride
                                if xi >= ow:
                                    continue
                                for oi in range(o):
                                    acc = acc + (<double>gv[ni, oi, zi, yi, xi]
                                                 * <double>wv[oi, ci, kz, ky, kx])
                    gx[ni, ci, iz, iy, ix] = <float>acc
    return gx_arr
