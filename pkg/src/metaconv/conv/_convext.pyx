# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels: direct loops, no im2col materialization.

Matches numpy_backend semantics exactly (see that module's docstring).
"""
import numpy as np
cimport numpy as cnp

NAME = "ext"


def conv2d_forward(cnp.ndarray[double, ndim=3] images,
                   cnp.ndarray[double, ndim=3] kernels, int pad):
    cdef Py_ssize_t B = images.shape[0], H = images.shape[1], W = images.shape[2]
    cdef Py_ssize_t C = kernels.shape[0], kh = kernels.shape[1], kw = kernels.shape[2]
    cdef cnp.ndarray[double, ndim=4] out = np.zeros((B, C, H, W))
    cdef double[:, :, ::1] img = np.ascontiguousarray(images)
    cdef double[:, :, ::1] K = np.ascontiguousarray(kernels)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t b, c, i, j, m, n, ii, jj
    cdef double acc
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        acc = 0.0
                        for m in range(kh):
                            ii = i + m - pad
                            if ii < 0 or ii >= H:
                                continue
                            for n in range(kw):
                                jj = j + n - pad
                                if jj < 0 or jj >= W:
                                    continue
                                acc += K[c, m, n] * img[b, ii, jj]
                        o[b, c, i, j] = acc
    return out


def conv2d_weight_grad(cnp.ndarray[double, ndim=3] images,
                       cnp.ndarray[double, ndim=4] dout, int kh, int kw, int pad):
    cdef Py_ssize_t B = images.shape[0], H = images.shape[1], W = images.shape[2]
    cdef Py_ssize_t C = dout.shape[1]
    cdef cnp.ndarray[double, ndim=3] grad = np.zeros((C, kh, kw))
    cdef double[:, :, ::1] img = np.ascontiguousarray(images)
    cdef double[:, :, :, ::1] d = np.ascontiguousarray(dout)
    cdef double[:, :, ::1] g = grad
    cdef Py_ssize_t b, c, i, j, m, n, ii, jj
    cdef double dv
    with nogil:
        for c in range(C):
            for b in range(B):
                for i in range(H):
                    for j in range(W):
                        dv = d[b, c, i, j]
                        if dv == 0.0:
                            continue
                        for m in range(kh):
                            ii = i + m - pad
                            if ii < 0 or ii >= H:
                                continue
                            for n in range(kw):
                                jj = j + n - pad
                                if jj < 0 or jj >= W:
                                    continue
                                g[c, m, n] += dv * img[b, ii, jj]
    return grad


def maxpool2_forward(cnp.ndarray[double, ndim=4] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t h = H // 2, w = W // 2
    cdef cnp.ndarray[double, ndim=4] pooled = np.empty((B, C, h, w))
    cdef cnp.ndarray[cnp.uint8_t, ndim=4] arg = np.empty((B, C, h, w), dtype=np.uint8)
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x)
    cdef double[:, :, :, ::1] pv = pooled
    cdef cnp.uint8_t[:, :, :, ::1] av = arg
    cdef Py_ssize_t b, c, i, j, m, n
    cdef double best, v
    cdef cnp.uint8_t besti
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(h):
                    for j in range(w):
                        best = xv[b, c, 2 * i, 2 * j]
                        besti = 0
                        v = xv[b, c, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v; besti = 1
                        v = xv[b, c, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v; besti = 2
                        v = xv[b, c, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v; besti = 3
                        pv[b, c, i, j] = best
                        av[b, c, i, j] = besti
    return pooled, arg


def maxpool2_backward(cnp.ndarray[double, ndim=4] dpooled,
                      cnp.ndarray[cnp.uint8_t, ndim=4] arg, int H, int W):
    cdef Py_ssize_t B = dpooled.shape[0], C = dpooled.shape[1]
    cdef Py_ssize_t h = dpooled.shape[2], w = dpooled.shape[3]
    cdef cnp.ndarray[double, ndim=4] dx = np.zeros((B, C, H, W))
    cdef double[:, :, :, ::1] dp = np.ascontiguousarray(dpooled)
    cdef cnp.uint8_t[:, :, :, ::1] av = np.ascontiguousarray(arg)
    cdef double[:, :, :, ::1] dv = dx
    cdef Py_ssize_t b, c, i, j
    cdef cnp.uint8_t a
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(h):
                    for j in range(w):
                        a = av[b, c, i, j]
                        dv[b, c, 2 * i + (a >> 1), 2 * j + (a & 1)] = dp[b, c, i, j]
    return dx
