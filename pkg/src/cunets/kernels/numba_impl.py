"""Numba @njit kernel implementations.

Same contracts as :mod:`cunets.kernels.numpy_impl`, written as explicit
loops.  Innermost loops run over the last (contiguous) axis so LLVM can
vectorize them.  Compiled lazily on first use; ``cache=True`` persists the
machine code next to the package.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def conv2d_forward(xp, w, dilation, out_h, out_w):
    b, _, _, cin = xp.shape
    k = w.shape[0]
    cout = w.shape[3]
    y = np.zeros((b, out_h, out_w, cout), dtype=xp.dtype)
    for n in range(b):
        for i in range(out_h):
            for kh in range(k):
                row = xp[n, i + kh * dilation]
                for j in range(out_w):
                    acc = y[n, i, j]
                    for kw in range(k):
                        px = row[j + kw * dilation]
                        tap = w[kh, kw]
                        for ci in range(cin):
                            a = px[ci]
                            wr = tap[ci]
                            for co in range(cout):
                                acc[co] += a * wr[co]
    return y


@njit(cache=True)
def conv2d_weight_grad(xp, dy, k, dilation):
    b, out_h, out_w, cout = dy.shape
    cin = xp.shape[3]
    dw = np.zeros((k, k, cin, cout), dtype=dy.dtype)
    for n in range(b):
        for i in range(out_h):
            for kh in range(k):
                row = xp[n, i + kh * dilation]
                for j in range(out_w):
                    g = dy[n, i, j]
                    for kw in range(k):
                        px = row[j + kw * dilation]
                        tap = dw[kh, kw]
                        for ci in range(cin):
                            a = px[ci]
                            acc = tap[ci]
                            for co in range(cout):
                                acc[co] += a * g[co]
    return dw


@njit(cache=True)
def conv2d_input_grad(dy, w, dilation, padded_h, padded_w):
    b, out_h, out_w, cout = dy.shape
    k = w.shape[0]
    cin = w.shape[2]
    dxp = np.zeros((b, padded_h, padded_w, cin), dtype=dy.dtype)
    for n in range(b):
        for i in range(out_h):
            for kh in range(k):
                drow = dxp[n, i + kh * dilation]
                for j in range(out_w):
                    g = dy[n, i, j]
                    for kw in range(k):
                        dpx = drow[j + kw * dilation]
                        tap = w[kh, kw]
                        for ci in range(cin):
                            acc = 0.0
                            wr = tap[ci]
                            for co in range(cout):
                                acc += g[co] * wr[co]
                            dpx[ci] += acc
    return dxp


@njit(cache=True)
def convt2x2_forward(x, w):
    b, h, wd, cin = x.shape
    cout = w.shape[3]
    y = np.zeros((b, 2 * h, 2 * wd, cout), dtype=x.dtype)
    for n in range(b):
        for i in range(h):
            for j in range(wd):
                px = x[n, i, j]
                for u in range(2):
                    for v in range(2):
                        out = y[n, 2 * i + u, 2 * j + v]
                        tap = w[u, v]
                        for ci in range(cin):
                            a = px[ci]
                            wr = tap[ci]
                            for co in range(cout):
                                out[co] += a * wr[co]
    return y


@njit(cache=True)
def convt2x2_input_grad(dy, w):
    b = dy.shape[0]
    h, wd = dy.shape[1] // 2, dy.shape[2] // 2
    cin, cout = w.shape[2], w.shape[3]
    dx = np.zeros((b, h, wd, cin), dtype=dy.dtype)
    for n in range(b):
        for i in range(h):
            for j in range(wd):
                dpx = dx[n, i, j]
                for u in range(2):
                    for v in range(2):
                        g = dy[n, 2 * i + u, 2 * j + v]
                        tap = w[u, v]
                        for ci in range(cin):
                            acc = 0.0
                            wr = tap[ci]
                            for co in range(cout):
                                acc += g[co] * wr[co]
                            dpx[ci] += acc
    return dx


@njit(cache=True)
def convt2x2_weight_grad(x, dy):
    b, h, wd, cin = x.shape
    cout = dy.shape[3]
    dw = np.zeros((2, 2, cin, cout), dtype=dy.dtype)
    for n in range(b):
        for i in range(h):
            for j in range(wd):
                px = x[n, i, j]
                for u in range(2):
                    for v in range(2):
                        g = dy[n, 2 * i + u, 2 * j + v]
                        tap = dw[u, v]
                        for ci in range(cin):
                            a = px[ci]
                            acc = tap[ci]
                            for co in range(cout):
                                acc[co] += a * g[co]
    return dw


@njit(cache=True)
def maxpool2_forward(x):
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    y = np.empty((b, h2, w2, c), dtype=x.dtype)
    idx = np.empty((b, h2, w2, c), dtype=np.uint8)
    for n in range(b):
        for i in range(h2):
            for j in range(w2):
                for ci in range(c):
                    best = x[n, 2 * i, 2 * j, ci]
                    arg = np.uint8(0)
                    pos = 0
                    for u in range(2):
                        for v in range(2):
                            val = x[n, 2 * i + u, 2 * j + v, ci]
                            if val > best:
                                best = val
                                arg = np.uint8(pos)
                            pos += 1
                    y[n, i, j, ci] = best
                    idx[n, i, j, ci] = arg
    return y, idx


@njit(cache=True)
def maxpool2_input_grad(dy, idx, h, w):
    b, h2, w2, c = dy.shape
    dx = np.zeros((b, h, w, c), dtype=dy.dtype)
    for n in range(b):
        for i in range(h2):
            for j in range(w2):
                for ci in range(c):
                    pos = idx[n, i, j, ci]
                    u = pos // 2
                    v = pos % 2
                    dx[n, 2 * i + u, 2 * j + v, ci] += dy[n, i, j, ci]
    return dx


@njit(cache=True)
def hausdorff_directed_sq(a_pts, b_pts):
    worst = 0.0
    for ia in range(a_pts.shape[0]):
        ay = a_pts[ia, 0]
        ax = a_pts[ia, 1]
        best = np.inf
        for ib in range(b_pts.shape[0]):
            dy = float(ay - b_pts[ib, 0])
            dx = float(ax - b_pts[ib, 1])
            d2 = dy * dy + dx * dx
            if d2 < best:
                best = d2
                if best <= worst:
                    break  # this source point cannot raise the max
        if best > worst:
            worst = best
    return worst
