"""Pure-numpy kernel implementations.

Convolutions are expressed as im2col + GEMM so the heavy arithmetic runs
inside BLAS.  Inputs arrive already zero-padded (``xp``); gradients are
returned with respect to the padded array and sliced by the caller.

Array layouts: activations are NHWC, conv kernels are (kh, kw, cin, cout),
2x2 transposed-conv kernels are (2, 2, cin, cout).
"""

from __future__ import annotations

import numpy as np


def _im2col(xp: np.ndarray, k: int, dilation: int, out_h: int, out_w: int) -> np.ndarray:
    """Patch matrix of shape (B*out_h*out_w, k*k*C), rows in (kh, kw, c) order.

    Built by stacking the k*k shifted views along the channel axis; each
    copy is a strided-to-contiguous move with long contiguous runs, which
    is far cheaper than gathering a 6-D window view.
    """
    b, _, _, c = xp.shape
    if k == 1:
        return xp.reshape(b * out_h * out_w, c)
    shifts = [
        xp[:, i * dilation: i * dilation + out_h, j * dilation: j * dilation + out_w, :]
        for i in range(k)
        for j in range(k)
    ]
    return np.concatenate(shifts, axis=3).reshape(b * out_h * out_w, k * k * c)


def conv2d_forward(xp, w, dilation, out_h, out_w):
    y, _ = conv2d_forward_col(xp, w, dilation, out_h, out_w)
    return y


def conv2d_forward_col(xp, w, dilation, out_h, out_w):
    """Forward pass that also returns the patch matrix for gradient reuse."""
    k, _, cin, cout = w.shape
    col = _im2col(xp, k, dilation, out_h, out_w)
    y = col @ w.reshape(k * k * cin, cout)
    return y.reshape(xp.shape[0], out_h, out_w, cout), col


def conv2d_weight_grad(xp, dy, k, dilation):
    out_h, out_w, cout = dy.shape[1], dy.shape[2], dy.shape[3]
    cin = xp.shape[3]
    col = _im2col(xp, k, dilation, out_h, out_w)
    dw = col.T @ dy.reshape(-1, cout)
    return dw.reshape(k, k, cin, cout)


def conv2d_weight_grad_col(col, dy, k, cin):
    cout = dy.shape[3]
    dw = col.T @ dy.reshape(-1, cout)
    return dw.reshape(k, k, cin, cout)


def conv2d_input_grad(dy, w, dilation, padded_h, padded_w):
    b, out_h, out_w, cout = dy.shape
    k, _, cin, _ = w.shape
    dcol = dy.reshape(-1, cout) @ w.reshape(k * k * cin, cout).T
    if k == 1:
        return dcol.reshape(b, out_h, out_w, cin)
    pieces = np.split(dcol.reshape(b, out_h, out_w, k * k * cin), k * k, axis=3)
    dxp = np.zeros((b, padded_h, padded_w, cin), dtype=dy.dtype)
    for tap, piece in enumerate(pieces):
        di, dj = (tap // k) * dilation, (tap % k) * dilation
        dxp[:, di: di + out_h, dj: dj + out_w, :] += piece
    return dxp


def convt2x2_forward(x, w):
    # stride-2 kernel-2 transposed conv: non-overlapping 2x2 output tiles
    b, h, wd, cin = x.shape
    cout = w.shape[3]
    t = x.reshape(-1, cin) @ w.transpose(2, 0, 1, 3).reshape(cin, 4 * cout)
    t = t.reshape(b, h, wd, 2, 2, cout).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(t).reshape(b, 2 * h, 2 * wd, cout)


def _convt_tiles(dy):
    b, h2, w2, cout = dy.shape
    h, wd = h2 // 2, w2 // 2
    tiles = dy.reshape(b, h, 2, wd, 2, cout).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(tiles).reshape(b * h * wd, 4 * cout)


def convt2x2_input_grad(dy, w):
    b = dy.shape[0]
    h, wd = dy.shape[1] // 2, dy.shape[2] // 2
    cin, cout = w.shape[2], w.shape[3]
    dx = _convt_tiles(dy) @ w.transpose(2, 0, 1, 3).reshape(cin, 4 * cout).T
    return dx.reshape(b, h, wd, cin)


def convt2x2_weight_grad(x, dy):
    cin = x.shape[3]
    cout = dy.shape[3]
    dw = x.reshape(-1, cin).T @ _convt_tiles(dy)
    return dw.reshape(cin, 2, 2, cout).transpose(1, 2, 0, 3)


def maxpool2_forward(x):
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    windows = x.reshape(b, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    windows = np.ascontiguousarray(windows).reshape(b, h2, w2, c, 4)
    idx = windows.argmax(axis=-1).astype(np.uint8)  # first max wins: deterministic
    y = np.take_along_axis(windows, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return y, idx


def maxpool2_input_grad(dy, idx, h, w):
    b, h2, w2, c = dy.shape
    dwin = np.zeros((b, h2, w2, c, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
    dx = dwin.reshape(b, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(dx).reshape(b, h, w, c)


def hausdorff_directed_sq(a_pts, b_pts):
    """max over a of min over b of squared euclidean distance (chunked)."""
    worst = 0.0
    chunk = max(1, 2_000_000 // max(len(b_pts), 1))
    bt = b_pts.astype(np.float64)
    for start in range(0, len(a_pts), chunk):
        block = a_pts[start: start + chunk].astype(np.float64)
        d2 = ((block[:, None, :] - bt[None, :, :]) ** 2).sum(axis=2)
        worst = max(worst, float(d2.min(axis=1).max()))
    return worst
