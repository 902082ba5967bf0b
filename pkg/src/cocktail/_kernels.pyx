# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels for the autodiff engine.

Every function here has a numpy twin in :mod:`cocktail._fallback` with the
same signature. ``im2col`` and ``col2im`` are bit-identical to the twins
(same accumulation order); the transcendental kernels agree to rounding.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xpad, int kh, int kw, int stride):
    cdef Py_ssize_t B = xpad.shape[0], C = xpad.shape[1]
    cdef Py_ssize_t Hp = xpad.shape[2], Wp = xpad.shape[3]
    cdef Py_ssize_t Ho = (Hp - kh) // stride + 1
    cdef Py_ssize_t Wo = (Wp - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((B, Ho, Wo, C, kh, kw), dtype=dtype)
    cdef real[:, :, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, ho, wo, i, j, y0, x0
    for b in range(B):
        for ho in range(Ho):
            y0 = ho * stride
            for wo in range(Wo):
                x0 = wo * stride
                for c in range(C):
                    for i in range(kh):
                        for j in range(kw):
                            out[b, ho, wo, c, i, j] = xpad[b, c, y0 + i, x0 + j]
    return out_arr


def col2im(real[:, :, :, :, :, ::1] cols, int Hp, int Wp, int stride):
    cdef Py_ssize_t B = cols.shape[0], Ho = cols.shape[1], Wo = cols.shape[2]
    cdef Py_ssize_t C = cols.shape[3], kh = cols.shape[4], kw = cols.shape[5]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((B, C, Hp, Wp), dtype=dtype)
    cdef real[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, ho, wo, i, j
    # (i, j) outermost so each cell sums its contributions in the fallback's order
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    for ho in range(Ho):
                        for wo in range(Wo):
                            out[b, c, ho * stride + i, wo * stride + j] += cols[b, ho, wo, c, i, j]
    return out_arr


def silu_forward(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], k
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty(n, dtype=dtype)
    cdef real[::1] out = out_arr
    cdef double v
    for k in range(n):
        v = x[k]
        out[k] = <real>(v / (1.0 + exp(-v)))
    return out_arr


def silu_backward(real[::1] x, real[::1] g):
    cdef Py_ssize_t n = x.shape[0], k
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty(n, dtype=dtype)
    cdef real[::1] out = out_arr
    cdef double v, s
    for k in range(n):
        v = x[k]
        s = 1.0 / (1.0 + exp(-v))
        out[k] = <real>(g[k] * s * (1.0 + v * (1.0 - s)))
    return out_arr


def channel_stats(real[:, ::1] x, double eps):
    """Two-pass mean / population std per row, accumulated in float64."""
    cdef Py_ssize_t R = x.shape[0], N = x.shape[1], r, k
    mu_arr = np.empty(R, dtype=np.float64)
    sd_arr = np.empty(R, dtype=np.float64)
    cdef double[::1] mu = mu_arr
    cdef double[::1] sd = sd_arr
    cdef double acc, d
    for r in range(R):
        acc = 0.0
        for k in range(N):
            acc += x[r, k]
        acc /= N
        mu[r] = acc
        d = 0.0
        for k in range(N):
            d += (x[r, k] - acc) * (x[r, k] - acc)
        sd[r] = sqrt(d / N + eps)
    return mu_arr, sd_arr
