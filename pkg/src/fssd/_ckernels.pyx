# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled sliding-window kernels for convolution and max-pooling.

Signatures and output layouts mirror ``fssd.kernels._np_*`` exactly; the
test suite checks both backends against each other.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] xp, int kh, int kw, int stride):
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t oh = (hp - kh) // stride + 1
    cdef Py_ssize_t ow = (wp - kw) // stride + 1
    out_arr = np.empty((n, oh, ow, c * kh * kw), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, y, x, ch, i, j, col, y0, x0
    for b in range(n):
        for y in range(oh):
            y0 = y * stride
            for x in range(ow):
                x0 = x * stride
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            out[b, y, x, col] = xp[b, ch, y0 + i, x0 + j]
                            col += 1
    return out_arr


def col2im(const double[:, :, :, ::1] dcols, tuple padded_shape, int kh, int kw, int stride):
    cdef Py_ssize_t n = padded_shape[0], c = padded_shape[1]
    cdef Py_ssize_t hp = padded_shape[2], wp = padded_shape[3]
    cdef Py_ssize_t oh = dcols.shape[1], ow = dcols.shape[2]
    dx_arr = np.zeros((n, c, hp, wp), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, y, x, ch, i, j, col, y0, x0
    for b in range(n):
        for y in range(oh):
            y0 = y * stride
            for x in range(ow):
                x0 = x * stride
                col = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            dx[b, ch, y0 + i, x0 + j] += dcols[b, y, x, col]
                            col += 1
    return dx_arr


def maxpool_forward(const double[:, :, :, ::1] x, int k, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1]
    cdef Py_ssize_t oh = (x.shape[2] - k) // stride + 1
    cdef Py_ssize_t ow = (x.shape[3] - k) // stride + 1
    out_arr = np.empty((n, c, oh, ow), dtype=np.float64)
    arg_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t b, ch, y, xx, i, j, best_idx
    cdef double best, v
    for b in range(n):
        for ch in range(c):
            for y in range(oh):
                for xx in range(ow):
                    best = x[b, ch, y * stride, xx * stride]
                    best_idx = 0
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ch, y * stride + i, xx * stride + j]
                            # strict '>' keeps the first maximum, like np.argmax
                            if v > best:
                                best = v
                                best_idx = i * k + j
                    out[b, ch, y, xx] = best
                    arg[b, ch, y, xx] = best_idx
    return out_arr, arg_arr


def maxpool_backward(const double[:, :, :, ::1] dout, const cnp.int64_t[:, :, :, ::1] arg,
                     tuple x_shape, int k, int stride):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1]
    cdef Py_ssize_t oh = dout.shape[2], ow = dout.shape[3]
    dx_arr = np.zeros(x_shape, dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t b, ch, y, xx, a
    for b in range(n):
        for ch in range(c):
            for y in range(oh):
                for xx in range(ow):
                    a = arg[b, ch, y, xx]
                    dx[b, ch, y * stride + a // k, xx * stride + a % k] += dout[b, ch, y, xx]
    return dx_arr
