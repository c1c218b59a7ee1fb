"""Pure-numpy kernel backend (reference semantics for the Cython twin)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x: np.ndarray, k: int, cols: np.ndarray) -> np.ndarray:
    """Gather receptive-field values into an (n*P, Q) patch matrix.

    Row r = (image, output position) in row-major order; column q holds
    input[channel, oy+dy, ox+dx] for cols[q] = (channel, dy, dx).
    """
    n, c, h, w = x.shape
    oh, ow = h - k + 1, w - k + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {k} larger than input {h}x{w}")
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # (n, c, oh, ow, k, k)
    ch, dy, dx = cols[:, 0], cols[:, 1], cols[:, 2]
    feat = win[:, ch, :, :, dy, dx]  # advanced indexing -> (Q, n, oh, ow)
    return np.ascontiguousarray(
        feat.transpose(1, 2, 3, 0).reshape(n * oh * ow, len(cols))
    )


def col2im(dcols: np.ndarray, cols: np.ndarray, shape, k: int) -> np.ndarray:
    """Scatter-add patch-matrix gradients back to input layout."""
    n, c, h, w = shape
    oh, ow = h - k + 1, w - k + 1
    P, Q = oh * ow, len(cols)
    oy, ox = np.divmod(np.arange(P), ow)
    # flat (c*h*w) input index hit by output position p, column q
    idx = (
        cols[:, 0][None, :] * (h * w)
        + (oy[:, None] + cols[:, 1][None, :]) * w
        + (ox[:, None] + cols[:, 2][None, :])
    ).ravel()
    d = dcols.reshape(n, P * Q)
    out = np.empty((n, c * h * w), dtype=np.float64)
    for i in range(n):
        out[i] = np.bincount(idx, weights=d[i], minlength=c * h * w)
    return out.astype(dcols.dtype, copy=False).reshape(n, c, h, w)


def maxpool2(x: np.ndarray):
    """2x2 stride-2 max pool; ties go to the lowest window index."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    oh, ow = h // 2, w // 2
    win = (
        x.reshape(n, c, oh, 2, ow, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, 4)
    )
    arg = win.argmax(axis=4)
    y = np.take_along_axis(win, arg[..., None], axis=4)[..., 0]
    return np.ascontiguousarray(y), arg.astype(np.uint8)


def maxpool2_grad(dy: np.ndarray, argwin: np.ndarray) -> np.ndarray:
    n, c, oh, ow = dy.shape
    out = np.zeros((n, c, oh, ow, 4), dtype=dy.dtype)
    np.put_along_axis(out, argwin[..., None].astype(np.intp), dy[..., None], axis=4)
    return np.ascontiguousarray(
        out.reshape(n, c, oh, ow, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh * 2, ow * 2)
    )
