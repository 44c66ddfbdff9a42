# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled kernels for the fixed fan-in layer.

Hot loops of training: forward scoring, weight gradients and input
gradients driven by a sparse loss derivative. The NumPy fallback in
``_kernels_py`` mirrors this call surface.
"""

import numpy as np

from libc.stdint cimport int64_t, uint16_t, uint32_t

ctypedef fused floating:
    float
    double

ctypedef fused index_t:
    uint16_t
    uint32_t


def forward(floating[:, ::1] weights, index_t[:, ::1] indices,
            floating[:, ::1] x):
    """out[b, l] = sum_j weights[l, j] * x[b, indices[l, j]], left to right."""
    cdef Py_ssize_t batch = x.shape[0]
    cdef Py_ssize_t rows = weights.shape[0]
    cdef Py_ssize_t fan_in = weights.shape[1]
    cdef Py_ssize_t b, l, j
    cdef floating acc
    if floating is float:
        out_np = np.zeros((batch, rows), dtype=np.float32)
    else:
        out_np = np.zeros((batch, rows), dtype=np.float64)
    cdef floating[:, ::1] out = out_np
    for b in range(batch):
        for l in range(rows):
            acc = 0
            for j in range(fan_in):
                acc = acc + weights[l, j] * x[b, indices[l, j]]
            out[b, l] = acc
    return out_np


def backward_weights(index_t[:, ::1] indices, floating[:, ::1] x,
                     int64_t[::1] dptr, int64_t[::1] dlab,
                     floating[::1] dval):
    """Weight gradient from sparse loss derivatives; cost nnz * fan_in."""
    cdef Py_ssize_t batch = dptr.shape[0] - 1
    cdef Py_ssize_t rows = indices.shape[0]
    cdef Py_ssize_t fan_in = indices.shape[1]
    cdef Py_ssize_t b, j, l
    cdef int64_t e, touches = 0
    cdef floating v
    if floating is float:
        grad_np = np.zeros((rows, fan_in), dtype=np.float32)
    else:
        grad_np = np.zeros((rows, fan_in), dtype=np.float64)
    cdef floating[:, ::1] grad = grad_np
    for b in range(batch):
        for e in range(dptr[b], dptr[b + 1]):
            l = dlab[e]
            v = dval[e]
            for j in range(fan_in):
                grad[l, j] += v * x[b, indices[l, j]]
                touches += 1
    return grad_np, touches


def backward_input(floating[:, ::1] weights, index_t[:, ::1] indices,
                   int64_t[::1] dptr, int64_t[::1] dlab, floating[::1] dval,
                   Py_ssize_t batch, Py_ssize_t num_cols):
    """Input gradient: scatter-add over delta entries only."""
    cdef Py_ssize_t rows = weights.shape[0]
    cdef Py_ssize_t fan_in = weights.shape[1]
    cdef Py_ssize_t b, j, l
    cdef int64_t e, touches = 0
    cdef floating v
    if floating is float:
        xg_np = np.zeros((batch, num_cols), dtype=np.float32)
    else:
        xg_np = np.zeros((batch, num_cols), dtype=np.float64)
    cdef floating[:, ::1] xg = xg_np
    for b in range(batch):
        for e in range(dptr[b], dptr[b + 1]):
            l = dlab[e]
            v = dval[e]
            for j in range(fan_in):
                xg[b, indices[l, j]] += v * weights[l, j]
                touches += 1
    return xg_np, touches
