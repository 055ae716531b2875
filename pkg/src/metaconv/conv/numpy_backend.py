"""Pure-numpy convolution kernels (im2col + BLAS).

Semantics shared with the compiled extension:
- conv2d is a cross-correlation (no kernel flip), zero-padded, stride 1;
- 2x2 max pooling resolves ties to the first window element in row-major
  order, so backends agree bit-for-bit on the pooling path.
"""
from __future__ import annotations

import numpy as np

NAME = "numpy"


def _im2col(images: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    B, H, W = images.shape
    p = np.zeros((B, H + 2 * pad, W + 2 * pad), dtype=images.dtype)
    p[:, pad:pad + H, pad:pad + W] = images
    s = p.strides
    view = np.lib.stride_tricks.as_strided(
        p, (B, H, W, kh, kw), (s[0], s[1], s[2], s[1], s[2]))
    return view.reshape(B * H * W, kh * kw)


def conv2d_forward(images: np.ndarray, kernels: np.ndarray, pad: int) -> np.ndarray:
    """(B,H,W) x (C,kh,kw) -> (B,C,H,W), zero-padded cross-correlation."""
    B, H, W = images.shape
    C, kh, kw = kernels.shape
    cols = _im2col(images, kh, kw, pad)
    out = cols @ kernels.reshape(C, kh * kw).T
    return out.reshape(B, H, W, C).transpose(0, 3, 1, 2)


def conv2d_weight_grad(images: np.ndarray, dout: np.ndarray, kh: int, kw: int,
                       pad: int) -> np.ndarray:
    """Gradient of conv2d_forward w.r.t. the kernels."""
    B, C, H, W = dout.shape
    cols = _im2col(images, kh, kw, pad)
    d = dout.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    return (d.T @ cols).reshape(C, kh, kw)


def maxpool2_forward(x: np.ndarray):
    """2x2 stride-2 max pool; returns (pooled, argmax in {0,1,2,3})."""
    B, C, H, W = x.shape
    r = x.reshape(B, C, H // 2, 2, W // 2, 2)
    cand = np.stack(
        (r[:, :, :, 0, :, 0], r[:, :, :, 0, :, 1],
         r[:, :, :, 1, :, 0], r[:, :, :, 1, :, 1]), axis=-1)
    arg = cand.argmax(axis=-1).astype(np.uint8)
    pooled = np.take_along_axis(cand, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return pooled, arg


def maxpool2_backward(dpooled: np.ndarray, arg: np.ndarray, H: int, W: int) -> np.ndarray:
    B, C, h, w = dpooled.shape
    dx = np.zeros((B, C, h, 2, w, 2), dtype=dpooled.dtype)
    oy = (arg >> 1).astype(np.intp)
    ox = (arg & 1).astype(np.intp)
    bi, ci, yi, xi = np.ogrid[:B, :C, :h, :w]
    dx[bi, ci, yi, oy, xi, ox] = dpooled
    return dx.reshape(B, C, H, W)
