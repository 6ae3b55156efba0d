# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: row-wise layer norm, SiLU, and pairwise kernel sums.

Inputs are 2-D C-contiguous float32 or float64 arrays. ``fxdl.kernels``
reshapes and dispatches; call through it rather than importing this module.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expf, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


def layer_norm_fwd(real[:, ::1] x, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    r_arr = np.empty(n, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[::1] r = r_arr
    cdef double mu, var, c, rs
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            rs = 1.0 / sqrt(var + eps)
            r[i] = <real>rs
            for j in range(d):
                y[i, j] = <real>((x[i, j] - mu) * rs)
    return y_arr, r_arr


def layer_norm_bwd(real[:, ::1] gy, real[:, ::1] y, real[::1] rstd):
    cdef Py_ssize_t n = gy.shape[0], d = gy.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] gx = gx_arr
    cdef double m1, m2
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                m1 += gy[i, j]
                m2 += gy[i, j] * y[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                gx[i, j] = <real>((gy[i, j] - m1 - y[i, j] * m2) * rstd[i])
    return gx_arr


def silu_fwd(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    s_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] s = s_arr
    cdef real v, sg
    with nogil:
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                if real is float:
                    sg = 1.0 / (1.0 + expf(-v))
                else:
                    sg = 1.0 / (1.0 + exp(-v))
                s[i, j] = sg
                y[i, j] = v * sg
    return y_arr, s_arr


def silu_bwd(real[:, ::1] gy, real[:, ::1] x, real[:, ::1] s):
    cdef Py_ssize_t n = gy.shape[0], d = gy.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] gx = gx_arr
    cdef real sg
    with nogil:
        for i in range(n):
            for j in range(d):
                sg = s[i, j]
                gx[i, j] = gy[i, j] * sg * (1 + x[i, j] * (1 - sg))
    return gx_arr


cdef double _sqdist(const double[:, ::1] a, Py_ssize_t i,
                    const double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t k
    cdef double acc = 0.0, c
    for k in range(a.shape[1]):
        c = a[i, k] - b[j, k]
        acc += c * c
    return acc


def gaussian_kernel_sums(const double[:, ::1] x, const double[:, ::1] y, double bandwidth):
    cdef Py_ssize_t m = x.shape[0], n = y.shape[0], i, j
    cdef double gamma = 0.5 / (bandwidth * bandwidth)
    cdef double sxx = 0.0, syy = 0.0, sxy = 0.0, txy = 0.0, k
    with nogil:
        for i in range(m):
            for j in range(i + 1, m):
                sxx += exp(-gamma * _sqdist(x, i, x, j))
        for i in range(n):
            for j in range(i + 1, n):
                syy += exp(-gamma * _sqdist(y, i, y, j))
        for i in range(m):
            for j in range(n):
                k = exp(-gamma * _sqdist(x, i, y, j))
                sxy += k
                if i == j:
                    txy += k
    return 2.0 * sxx, 2.0 * syy, sxy, txy


def mean_pairwise_distance(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], i, j
    cdef double acc = 0.0
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                acc += sqrt(_sqdist(x, i, x, j))
    return acc / (n * (n - 1) / 2.0)
