# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled dense kernels. Same contracts as kernels._numpy; wins on the
small matrices of the per-sample inference path where call overhead and
BLAS setup dominate."""

import numpy as np

from libc.math cimport exp, log, sqrt, tanh

GELU_CUBIC = 0.044715
GELU_SCALE = 0.7978845608028654
LN_EPS = 1e-5

cdef double _GELU_CUBIC = 0.044715
cdef double _GELU_SCALE = 0.7978845608028654
cdef double _LN_EPS = 1e-5


def matmul(a, b):
    if not (isinstance(a, np.ndarray) and a.ndim == 2 and a.dtype == np.float64):
        raise ValueError("a must be a 2-D float64 array")
    if not (isinstance(b, np.ndarray) and b.ndim == 2 and b.dtype == np.float64):
        raise ValueError("b must be a 2-D float64 array")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    _matmul(a, b, out)
    return out


cdef void _matmul(double[:, ::1] a, double[:, ::1] b, double[:, ::1] out) noexcept:
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, j, p
    cdef double acc
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc


def matmul_nt(a, b):
    if not (isinstance(a, np.ndarray) and a.ndim == 2 and a.dtype == np.float64):
        raise ValueError("a must be a 2-D float64 array")
    if not (isinstance(b, np.ndarray) and b.ndim == 2 and b.dtype == np.float64):
        raise ValueError("b must be a 2-D float64 array")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"matmul_nt shape mismatch: {a.shape} x {b.shape}^T")
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    _matmul_nt(a, b, out)
    return out


cdef void _matmul_nt(double[:, ::1] a, double[:, ::1] b, double[:, ::1] out) noexcept:
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[0]
    cdef Py_ssize_t i, j, p
    cdef double acc
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[j, p]
            out[i, j] = acc


def softmax_rows(m):
    if not (isinstance(m, np.ndarray) and m.ndim == 2 and m.dtype == np.float64):
        raise ValueError("m must be a 2-D float64 array")
    out = np.empty_like(m)
    _softmax_rows(m, out)
    return out


cdef void _softmax_rows(double[:, ::1] m, double[:, ::1] out) noexcept:
    cdef Py_ssize_t rows = m.shape[0], cols = m.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, s
    for i in range(rows):
        mx = m[i, 0]
        for j in range(1, cols):
            if m[i, j] > mx:
                mx = m[i, j]
        s = 0.0
        for j in range(cols):
            out[i, j] = exp(m[i, j] - mx)
            s += out[i, j]
        for j in range(cols):
            out[i, j] /= s


def layer_norm_rows(m, gain, bias):
    if not (isinstance(m, np.ndarray) and m.ndim == 2 and m.dtype == np.float64):
        raise ValueError("m must be a 2-D float64 array")
    if gain.shape != (m.shape[1],) or bias.shape != (m.shape[1],):
        raise ValueError("gain/bias must match row width")
    out = np.empty_like(m)
    _layer_norm_rows(m, np.ascontiguousarray(gain), np.ascontiguousarray(bias), out)
    return out


cdef void _layer_norm_rows(double[:, ::1] m, double[::1] gain, double[::1] bias,
                           double[:, ::1] out) noexcept:
    cdef Py_ssize_t rows = m.shape[0], cols = m.shape[1]
    cdef Py_ssize_t i, j
    cdef double mu, var, d, inv, first
    for i in range(rows):
        # shift-invariant mean: constant rows center to exact zeros
        first = m[i, 0]
        mu = 0.0
        for j in range(cols):
            mu += m[i, j] - first
        mu = first + mu / cols
        var = 0.0
        for j in range(cols):
            d = m[i, j] - mu
            var += d * d
        var /= cols
        inv = 1.0 / sqrt(var + _LN_EPS)
        for j in range(cols):
            out[i, j] = (m[i, j] - mu) * inv * gain[j] + bias[j]


def gelu_mat(m):
    if not (isinstance(m, np.ndarray) and m.ndim == 2 and m.dtype == np.float64):
        raise ValueError("m must be a 2-D float64 array")
    out = np.empty_like(m)
    _gelu_mat(m, out)
    return out


cdef void _gelu_mat(double[:, ::1] m, double[:, ::1] out) noexcept:
    cdef Py_ssize_t rows = m.shape[0], cols = m.shape[1]
    cdef Py_ssize_t i, j
    cdef double x, inner
    for i in range(rows):
        for j in range(cols):
            x = m[i, j]
            inner = _GELU_SCALE * (x + _GELU_CUBIC * x * x * x)
            out[i, j] = 0.5 * x * (1.0 + tanh(inner))


def gelu_grad_mat(m):
    if not (isinstance(m, np.ndarray) and m.ndim == 2 and m.dtype == np.float64):
        raise ValueError("m must be a 2-D float64 array")
    out = np.empty_like(m)
    _gelu_grad_mat(m, out)
    return out


cdef void _gelu_grad_mat(double[:, ::1] m, double[:, ::1] out) noexcept:
    cdef Py_ssize_t rows = m.shape[0], cols = m.shape[1]
    cdef Py_ssize_t i, j
    cdef double x, inner, t, sech2
    for i in range(rows):
        for j in range(cols):
            x = m[i, j]
            inner = _GELU_SCALE * (x + _GELU_CUBIC * x * x * x)
            t = tanh(inner)
            sech2 = 1.0 - t * t
            out[i, j] = 0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_SCALE * (1.0 + 3.0 * _GELU_CUBIC * x * x)
