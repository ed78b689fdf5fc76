# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col/col2im kernels for zero-padded strided 3-D convolution.

Column layout: ``cols[b, k, l]`` with ``k = ((c * kd + a) * kh + e) * kw + f``
and ``l`` running over output voxels in (d, h, w) row-major order, so that
``W.reshape(O, K) @ cols[b]`` is already the [O, Do*Ho*Wo] output block.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _lo(Py_ssize_t f, Py_ssize_t s, Py_ssize_t p):
    # first output index whose input coordinate o*s + f - p is >= 0
    if f >= p:
        return 0
    return (p - f + s - 1) // s


cdef inline Py_ssize_t _hi(Py_ssize_t n, Py_ssize_t no, Py_ssize_t f, Py_ssize_t s, Py_ssize_t p):
    # one past the last output index whose input coordinate is < n
    cdef Py_ssize_t top = n - 1 - f + p
    if top < 0:
        return 0
    top = top // s + 1
    return top if top < no else no


cdef inline Py_ssize_t _out_extent(Py_ssize_t n, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p):
    return (n + 2 * p - k) // s + 1


def im2col3d(const real[:, :, :, :, ::1] x, int kd, int kh, int kw,
             int sd, int sh, int sw, int pd, int ph, int pw):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t D = x.shape[2], H = x.shape[3], W = x.shape[4]
    cdef Py_ssize_t Do = _out_extent(D, kd, sd, pd)
    cdef Py_ssize_t Ho = _out_extent(H, kh, sh, ph)
    cdef Py_ssize_t Wo = _out_extent(W, kw, sw, pw)
    cdef Py_ssize_t K = C * kd * kh * kw
    out = np.zeros((B, K, Do * Ho * Wo), dtype=np.float64 if real is double else np.float32)
    cdef real[:, :, ::1] cols = out
    cdef Py_ssize_t b, c, a, e, f, od, oh, ow, l, k, z, y, w0, w1
    cdef const real* src
    cdef real* dst
    for b in range(B):
        k = 0
        for c in range(C):
            for a in range(kd):
                for e in range(kh):
                    for f in range(kw):
                        w0 = _lo(f, sw, pw)
                        w1 = _hi(W, Wo, f, sw, pw)
                        for od in range(Do):
                            z = od * sd + a - pd
                            if z < 0 or z >= D:
                                continue
                            for oh in range(Ho):
                                y = oh * sh + e - ph
                                if y < 0 or y >= H:
                                    continue
                                l = (od * Ho + oh) * Wo
                                src = &x[b, c, z, y, 0]
                                dst = &cols[b, k, l]
                                for ow in range(w0, w1):
                                    dst[ow] = src[ow * sw + f - pw]
                        k += 1
    return out


def col2im3d(const double[:, :, ::1] cols, int C, int D, int H, int W,
             int kd, int kh, int kw, int sd, int sh, int sw, int pd, int ph, int pw):
    cdef Py_ssize_t B = cols.shape[0]
    cdef Py_ssize_t Do = _out_extent(D, kd, sd, pd)
    cdef Py_ssize_t Ho = _out_extent(H, kh, sh, ph)
    cdef Py_ssize_t Wo = _out_extent(W, kw, sw, pw)
    out = np.zeros((B, C, D, H, W), dtype=np.float64)
    cdef double[:, :, :, :, ::1] x = out
    cdef Py_ssize_t b, c, a, e, f, od, oh, ow, l, k, z, y, w0, w1
    cdef const double* csrc
    cdef double* xdst
    for b in range(B):
        k = 0
        for c in range(C):
            for a in range(kd):
                for e in range(kh):
                    for f in range(kw):
                        w0 = _lo(f, sw, pw)
                        w1 = _hi(W, Wo, f, sw, pw)
                        for od in range(Do):
                            z = od * sd + a - pd
                            if z < 0 or z >= D:
                                continue
                            for oh in range(Ho):
                                y = oh * sh + e - ph
                                if y < 0 or y >= H:
                                    continue
                                l = (od * Ho + oh) * Wo
                                csrc = &cols[b, k, l]
                                xdst = &x[b, c, z, y, 0]
                                for ow in range(w0, w1):
                                    xdst[ow * sw + f - pw] += csrc[ow]
                        k += 1
    return out
