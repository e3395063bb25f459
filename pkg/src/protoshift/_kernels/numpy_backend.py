"""Pure-numpy convolution kernels (fallback backend).

Convolutions are zero-padded "same" with pad = kernel//2; layout is
channels-last: inputs (H, W, Ci), kernels (KH, KW, Ci, Co). Each routine is
expressed as KH*KW strided-slice matmuls, which keeps the work inside BLAS.
"""
from __future__ import annotations

import numpy as np

NAME = "numpy"


def _out_size(size: int, k: int, stride: int) -> int:
    pad = k // 2
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """Correlate x (H, W, Ci) with w (KH, KW, Ci, Co) plus bias b (Co,)."""
    h, wd, ci = x.shape
    kh, kw, ci_w, co = w.shape
    if ci != ci_w:
        raise ValueError(f"channel mismatch: input {ci}, kernel {ci_w}")
    ph, pw = kh // 2, kw // 2
    ho, wo = _out_size(h, kh, stride), _out_size(wd, kw, stride)
    xp = np.zeros((h + 2 * ph, wd + 2 * pw, ci))
    xp[ph:ph + h, pw:pw + wd] = x
    out = np.broadcast_to(b, (ho, wo, co)).copy()
    for ki in range(kh):
        for kj in range(kw):
            out += xp[ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] @ w[ki, kj]
    return out


def conv2d_backward_input(grad_out: np.ndarray, w: np.ndarray, stride: int,
                          in_h: int, in_w: int) -> np.ndarray:
    """Gradient of the forward output w.r.t. the (in_h, in_w, Ci) input."""
    kh, kw, ci, co = w.shape
    ho, wo, _ = grad_out.shape
    ph, pw = kh // 2, kw // 2
    gxp = np.zeros((in_h + 2 * ph, in_w + 2 * pw, ci))
    for ki in range(kh):
        for kj in range(kw):
            gxp[ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += grad_out @ w[ki, kj].T
    return gxp[ph:ph + in_h, pw:pw + in_w]


def conv2d_backward_weights(x: np.ndarray, grad_out: np.ndarray, kh: int, kw: int,
                            stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the kernel (KH, KW, Ci, Co) and bias (Co,)."""
    h, wd, ci = x.shape
    ho, wo, co = grad_out.shape
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((h + 2 * ph, wd + 2 * pw, ci))
    xp[ph:ph + h, pw:pw + wd] = x
    gflat = grad_out.reshape(-1, co)
    gw = np.empty((kh, kw, ci, co))
    for ki in range(kh):
        for kj in range(kw):
            patch = xp[ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
            gw[ki, kj] = patch.reshape(-1, ci).T @ gflat
    return gw, gflat.sum(axis=0)
