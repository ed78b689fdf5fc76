"""Convolution hot kernels with backend selection at import time.

The compiled extension ``resproxy._ckernels`` is used when it is importable;
otherwise (or when ``RESPROXY_PURE_PYTHON=1``) the numpy implementations
below are used. Both take the unpadded input plus padding widths and use the
column layout ``cols[b, k, l]``, ``k = ((c*kd + a)*kh + e)*kw + f``.
``im2col3d`` is a pure copy and matches exactly across backends;
``col2im3d`` sums overlapping windows in a different order, so the two agree
to rounding.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_extent(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def im2col3d_numpy(x, kd, kh, kw, sd, sh, sw, pd, ph, pw):
    B, C = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw))) if pd or ph or pw else x
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))[:, :, ::sd, ::sh, ::sw]
    Do, Ho, Wo = win.shape[2:5]
    # (B, C, kd, kh, kw, Do, Ho, Wo)
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    return np.ascontiguousarray(cols).reshape(B, C * kd * kh * kw, Do * Ho * Wo)


def col2im3d_numpy(cols, C, D, H, W, kd, kh, kw, sd, sh, sw, pd, ph, pw):
    B = cols.shape[0]
    Do, Ho, Wo = out_extent(D, kd, sd, pd), out_extent(H, kh, sh, ph), out_extent(W, kw, sw, pw)
    c8 = cols.reshape(B, C, kd, kh, kw, Do, Ho, Wo)
    out = np.zeros((B, C, D + 2 * pd, H + 2 * ph, W + 2 * pw))
    for a in range(kd):
        for e in range(kh):
            for f in range(kw):
                out[:, :, a:a + sd * Do:sd, e:e + sh * Ho:sh, f:f + sw * Wo:sw] += c8[:, :, a, e, f]
    return np.ascontiguousarray(out[:, :, pd:pd + D, ph:ph + H, pw:pw + W])


def _load_backend():
    if os.environ.get("RESPROXY_PURE_PYTHON", "") not in ("", "0"):
        return "python", im2col3d_numpy, col2im3d_numpy
    try:
        from resproxy import _ckernels
    except ImportError:
        return "python", im2col3d_numpy, col2im3d_numpy

    def im2col(x, kd, kh, kw, sd, sh, sw, pd, ph, pw):
        return _ckernels.im2col3d(np.ascontiguousarray(x), kd, kh, kw, sd, sh, sw, pd, ph, pw)

    def col2im(cols, C, D, H, W, kd, kh, kw, sd, sh, sw, pd, ph, pw):
        return _ckernels.col2im3d(np.ascontiguousarray(cols), C, D, H, W, kd, kh, kw, sd, sh, sw,
                                  pd, ph, pw)

    return "cython", im2col, col2im


BACKEND, im2col3d, col2im3d = _load_backend()
