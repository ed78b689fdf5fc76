"""Spatial network ops on [B, C, D, H, W] tensors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from .tensor import Tensor, as_tensor, make_node

_AXES = ("depth", "height", "width")


def _triple(v, what: str) -> tuple:
    if np.isscalar(v):
        v = (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"{what} needs 3 values, got {v}")
    return v


def conv3d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Zero-padded strided 3-D cross-correlation."""
    x, weight = as_tensor(x), as_tensor(weight)
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if x.ndim != 5:
        raise ValueError(f"conv3d input must be 5-D [B,C,D,H,W], got shape {x.shape}")
    if weight.ndim != 5:
        raise ValueError(f"conv3d kernel must be 5-D [Cout,Cin,kd,kh,kw], got shape {weight.shape}")
    B, C, D, H, W = x.shape
    O, Ck, kd, kh, kw = weight.shape
    if Ck != C:
        raise ValueError(f"conv3d channel mismatch: input has {C} channels, kernel expects {Ck}")
    ksize = (kd, kh, kw)
    for name, k, s, p, n in zip(_AXES, ksize, stride, padding, (D, H, W)):
        if s < 1:
            raise ValueError(f"conv3d stride on {name} axis must be >= 1, got {s}")
        if n + 2 * p < k:
            raise ValueError(f"conv3d padded {name} extent {n + 2 * p} smaller than kernel extent {k}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ValueError(f"conv3d bias must have shape ({O},), got {bias.shape}")

    Do, Ho, Wo = (kernels.out_extent(n, k, s, p) for n, k, s, p in zip((D, H, W), ksize, stride, padding))
    cols = kernels.im2col3d(x.data, kd, kh, kw, *stride, *padding)  # (B, K, L)
    wmat = weight.data.reshape(O, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, O, Do, Ho, Wo)

    def bw(g):
        gm = g.reshape(B, O, -1)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.einsum("bol,bkl->ok", gm, cols, optimize=True).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm)
            gx = kernels.col2im3d(gcols, C, D, H, W, kd, kh, kw, *stride, *padding)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_node(out, parents, bw)


def voxel_shuffle(x, r: int) -> Tensor:
    """Channel-to-space rearrangement [B, C*r^3, D, H, W] -> [B, C, rD, rH, rW]."""
    x = as_tensor(x)
    B, Cr, D, H, W = x.shape
    if Cr % (r ** 3):
        raise ValueError(f"voxel_shuffle: channel count {Cr} not divisible by r^3 = {r ** 3}")
    C = Cr // r ** 3
    out = (
        x.data.reshape(B, C, r, r, r, D, H, W)
        .transpose(0, 1, 5, 2, 6, 3, 7, 4)
        .reshape(B, C, r * D, r * H, r * W)
    )

    def bw(g):
        return (
            g.reshape(B, C, D, r, H, r, W, r)
            .transpose(0, 1, 3, 5, 7, 2, 4, 6)
            .reshape(B, Cr, D, H, W),
        )

    return make_node(np.ascontiguousarray(out), (x,), bw)


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    num_features: int
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None


def batch_norm(x, gamma, beta, state: BatchNormState, training: bool,
               eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    n = x.size // C
    if training:
        if n < 2:
            raise ValueError("batch_norm in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if not state.initialized:
            state.running_mean = np.zeros(C)
            state.running_var = np.ones(C)
        state.running_mean = (1 - momentum) * state.running_mean + momentum * mu
        state.running_var = (1 - momentum) * state.running_var + momentum * var * n / (n - 1)
    else:
        if not state.initialized:
            raise RuntimeError("batch_norm eval mode requires running statistics from a train-mode call")
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * g_
            if training:
                gx = inv.reshape(bshape) / n * (
                    n * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), bw)


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    n_out = n_in * factor
    M = np.zeros((n_out, n_in))
    if n_in == 1:
        M[:, 0] = 1.0
        return M
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    w = pos - lo
    M[np.arange(n_out), lo] = 1.0 - w
    M[np.arange(n_out), lo + 1] += w
    return M


def trilinear_upsample(x, factor) -> Tensor:
    """Corner-aligned trilinear interpolation by integer factors per axis."""
    x = as_tensor(x)
    factor = _triple(factor, "factor")
    if any(f < 1 for f in factor):
        raise ValueError(f"upsample factors must be >= 1, got {factor}")
    mats = [_interp_matrix(n, f) for n, f in zip(x.shape[2:], factor)]
    Md, Mh, Mw = mats
    out = np.einsum("bcdhw,pd,qh,rw->bcpqr", x.data, Md, Mh, Mw, optimize=True)

    def bw(g):
        return (np.einsum("bcpqr,pd,qh,rw->bcdhw", g, Md, Mh, Mw, optimize=True),)

    return make_node(out, (x,), bw)
