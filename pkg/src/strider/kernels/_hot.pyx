# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython kernel backend.

Signatures and semantics mirror ``strider.kernels._numpy`` exactly; that
module is the readable reference.  Both float32 and float64 inputs are
supported through a fused type so the float64 gradient-check path works
on either backend.
"""

import numpy as np

cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int k, long[:, ::1] cols):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = h - k + 1, ow = w - k + 1
    cdef Py_ssize_t P = oh * ow, Q = cols.shape[0]
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {k} larger than input {h}x{w}")

    if real is float:
        out_np = np.empty((n * P, Q), dtype=np.float32)
    else:
        out_np = np.empty((n * P, Q), dtype=np.float64)
    cdef real[:, ::1] out = out_np

    cdef Py_ssize_t i, oy, ox, q, row
    cdef long cq, yq, xq
    for i in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = i * P + oy * ow + ox
                for q in range(Q):
                    cq = cols[q, 0]
                    yq = oy + cols[q, 1]
                    xq = ox + cols[q, 2]
                    out[row, q] = x[i, cq, yq, xq]
    return out_np


def col2im(real[:, ::1] dcols, long[:, ::1] cols, shape, int k):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = h - k + 1, ow = w - k + 1
    cdef Py_ssize_t P = oh * ow, Q = cols.shape[0]

    if real is float:
        out_np = np.zeros((n, c, h, w), dtype=np.float32)
    else:
        out_np = np.zeros((n, c, h, w), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_np

    cdef Py_ssize_t i, oy, ox, q, row
    for i in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = i * P + oy * ow + ox
                for q in range(Q):
                    out[i, cols[q, 0], oy + cols[q, 1], ox + cols[q, 2]] += dcols[row, q]
    return out_np


def maxpool2(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    cdef Py_ssize_t oh = h // 2, ow = w // 2

    if real is float:
        y_np = np.empty((n, c, oh, ow), dtype=np.float32)
    else:
        y_np = np.empty((n, c, oh, ow), dtype=np.float64)
    arg_np = np.empty((n, c, oh, ow), dtype=np.uint8)
    cdef real[:, :, :, ::1] y = y_np
    cdef unsigned char[:, :, :, ::1] arg = arg_np

    cdef Py_ssize_t i, j, oy, ox, dy, dx
    cdef real best, v
    cdef unsigned char bi
    for i in range(n):
        for j in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    best = x[i, j, 2 * oy, 2 * ox]
                    bi = 0
                    for dy in range(2):
                        for dx in range(2):
                            v = x[i, j, 2 * oy + dy, 2 * ox + dx]
                            if v > best:
                                best = v
                                bi = <unsigned char> (dy * 2 + dx)
                    y[i, j, oy, ox] = best
                    arg[i, j, oy, ox] = bi
    return y_np, arg_np


def maxpool2_grad(real[:, :, :, ::1] dy, unsigned char[:, :, :, ::1] argwin):
    cdef Py_ssize_t n = dy.shape[0], c = dy.shape[1]
    cdef Py_ssize_t oh = dy.shape[2], ow = dy.shape[3]

    if real is float:
        out_np = np.zeros((n, c, oh * 2, ow * 2), dtype=np.float32)
    else:
        out_np = np.zeros((n, c, oh * 2, ow * 2), dtype=np.float64)
    cdef real[:, :, :, ::1] out = out_np

    cdef Py_ssize_t i, j, oy, ox
    cdef unsigned char a
    for i in range(n):
        for j in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    a = argwin[i, j, oy, ox]
                    out[i, j, 2 * oy + (a >> 1), 2 * ox + (a & 1)] = dy[i, j, oy, ox]
    return out_np
