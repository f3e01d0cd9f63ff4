# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython backend for the fastmath kernels.

Matmuls go through BLAS dgemm; bias add, tanh and the softplus head are
fused into single passes over the activations. Matches kernels_py to
float64 round-off (same BLAS as numpy).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log1p, tanh
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _gemm_rowmajor(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c) noexcept nogil:
    # c (m,n) = a (m,k) @ b (k,n), all row-major: compute c^T = b^T a^T in
    # column-major terms.
    cdef int m = a.shape[0]
    cdef int k = a.shape[1]
    cdef int n = b.shape[1]
    cdef double one = 1.0, zero = 0.0
    dgemm("N", "N", &n, &m, &k, &one, &b[0, 0], &n, &a[0, 0], &k, &zero, &c[0, 0], &n)


cdef void _bias_act(double[:, ::1] h, double[::1] bias, bint apply_tanh) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef Py_ssize_t rows = h.shape[0], cols = h.shape[1]
    for i in range(rows):
        for j in range(cols):
            h[i, j] = h[i, j] + bias[j]
            if apply_tanh:
                h[i, j] = tanh(h[i, j])


def mlp_forward(x, weights, biases):
    """See kernels_py.mlp_forward."""
    cdef double[:, ::1] h = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[:, ::1] w
    cdef double[::1] b
    cdef double[:, ::1] out
    cdef Py_ssize_t i, n = len(weights)
    cdef bint hidden
    for i in range(n):
        w = np.ascontiguousarray(weights[i], dtype=np.float64)
        b = np.ascontiguousarray(biases[i], dtype=np.float64)
        out = np.empty((h.shape[0], w.shape[1]), dtype=np.float64)
        hidden = i < n - 1
        with nogil:
            _gemm_rowmajor(h, w, out)
            _bias_act(out, b, hidden)
        h = out
    return np.asarray(h)


def gauss_head(x, weights, biases, double var_floor):
    """See kernels_py.gauss_head."""
    cdef double[:, ::1] out = mlp_forward(x, weights, biases)
    cdef Py_ssize_t rows = out.shape[0]
    cdef Py_ssize_t d = out.shape[1] // 2
    mean_arr = np.empty((rows, d), dtype=np.float64)
    var_arr = np.empty((rows, d), dtype=np.float64)
    cdef double[:, ::1] mean = mean_arr
    cdef double[:, ::1] var = var_arr
    cdef Py_ssize_t i, j
    cdef double v
    with nogil:
        for i in range(rows):
            for j in range(d):
                mean[i, j] = out[i, j]
                v = out[i, d + j]
                # softplus(v) = max(v, 0) + log1p(exp(-|v|))
                var[i, j] = (v if v > 0.0 else 0.0) + log1p(exp(-fabs(v))) + var_floor
    return mean_arr, var_arr
