"""Pure-numpy kernels (vectorized over batch and spatial dims).

All convolutions are 3x3, stride 2, zero padding 1; transposed convolutions
additionally use output padding 1, so spatial sizes exactly halve / double.
Inputs and outputs are C-order float64.
"""

import numpy as np

K = 3  # kernel size
S = 2  # stride


def _patches(x):
    """All 3x3 windows of the zero-padded input at stride 2.

    Returns a read-only view of shape [B, C, OH, OW, 3, 3].
    """
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2), dtype=np.float64)
    xp[:, :, 1:-1, 1:-1] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (K, K), axis=(2, 3))
    return win[:, :, ::S, ::S]


def conv2d_forward(x, w, bias):
    """x [B,C,H,W], w [F,C,3,3], bias [F] -> y [B,F,H/2,W/2]."""
    p = _patches(x)
    y = np.tensordot(p, w, axes=([1, 4, 5], [1, 2, 3]))  # [B,OH,OW,F]
    y += bias
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward(x, w, dy):
    """Gradients of conv2d_forward w.r.t. input, weights and bias."""
    b, c, h, wd = x.shape
    oh, ow = dy.shape[2], dy.shape[3]
    db = dy.sum(axis=(0, 2, 3))
    p = _patches(x)
    dw = np.tensordot(dy, p, axes=([0, 2, 3], [0, 2, 3]))  # [F,C,3,3]
    dxp = np.zeros((b, c, h + 2, wd + 2), dtype=np.float64)
    for ki in range(K):
        for kj in range(K):
            m = np.tensordot(dy, w[:, :, ki, kj], axes=([1], [0]))  # [B,OH,OW,C]
            dxp[:, :, ki : ki + S * oh : S, kj : kj + S * ow : S] += m.transpose(
                0, 3, 1, 2
            )
    dx = np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1])
    return dx, np.ascontiguousarray(dw), db


def convt2d_forward(x, w, bias):
    """x [B,C,h,w], w [C,F,3,3], bias [F] -> y [B,F,2h,2w]."""
    b, c, h, wd = x.shape
    f = w.shape[1]
    ye = np.zeros((b, f, 2 * h + 1, 2 * wd + 1), dtype=np.float64)
    for ki in range(K):
        for kj in range(K):
            m = np.tensordot(x, w[:, :, ki, kj], axes=([1], [0]))  # [B,h,w,F]
            ye[:, :, ki : ki + S * h : S, kj : kj + S * wd : S] += m.transpose(
                0, 3, 1, 2
            )
    y = ye[:, :, 1:, 1:] + bias[None, :, None, None]
    return np.ascontiguousarray(y)


def convt2d_backward(x, w, dy):
    """Gradients of convt2d_forward w.r.t. input, weights and bias."""
    b, c, h, wd = x.shape
    f = w.shape[1]
    db = dy.sum(axis=(0, 2, 3))
    dye = np.zeros((b, f, 2 * h + 1, 2 * wd + 1), dtype=np.float64)
    dye[:, :, 1:, 1:] = dy
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for ki in range(K):
        for kj in range(K):
            block = dye[:, :, ki : ki + S * h : S, kj : kj + S * wd : S]  # [B,F,h,w]
            dw[:, :, ki, kj] = np.tensordot(x, block, axes=([0, 2, 3], [0, 2, 3]))
            m = np.tensordot(block, w[:, :, ki, kj], axes=([1], [1]))  # [B,h,w,C]
            dx += m.transpose(0, 3, 1, 2)
    return dx, dw, db
