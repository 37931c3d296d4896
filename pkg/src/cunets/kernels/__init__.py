"""Dispatch layer over the numpy and numba kernel implementations.

Callers import kernel functions from here; :mod:`cunets.backend` decides
per kernel family which implementation runs.  The numba module is only
imported (and JIT-compiled) if some call actually resolves to it.
"""

from __future__ import annotations

from .. import backend
from . import numpy_impl

_numba_mod = None


def _impl(kernel: str):
    if backend.resolve(kernel) == "numba":
        global _numba_mod
        if _numba_mod is None:
            from . import numba_impl

            _numba_mod = numba_impl
        return _numba_mod
    return numpy_impl


def conv2d_forward(xp, w, dilation, out_h, out_w):
    return _impl("conv2d").conv2d_forward(xp, w, dilation, out_h, out_w)


def conv2d_forward_ctx(xp, w, dilation, out_h, out_w):
    """Forward pass plus an opaque context for the weight gradient.

    The numpy path hands back its patch matrix so the backward pass can
    skip rebuilding it (and drop the padded input entirely); the numba
    path recomputes from the padded input and uses no context.
    """
    impl = _impl("conv2d")
    if impl is numpy_impl:
        return numpy_impl.conv2d_forward_col(xp, w, dilation, out_h, out_w)
    return impl.conv2d_forward(xp, w, dilation, out_h, out_w), None


def conv2d_weight_grad(xp, dy, k, dilation):
    return _impl("conv2d").conv2d_weight_grad(xp, dy, k, dilation)


def conv2d_weight_grad_ctx(ctx, xp, dy, k, dilation, cin):
    if ctx is not None:
        return numpy_impl.conv2d_weight_grad_col(ctx, dy, k, cin)
    return _impl("conv2d").conv2d_weight_grad(xp, dy, k, dilation)


def conv2d_input_grad(dy, w, dilation, padded_h, padded_w):
    return _impl("conv2d").conv2d_input_grad(dy, w, dilation, padded_h, padded_w)


def convt2x2_forward(x, w):
    return _impl("convt").convt2x2_forward(x, w)


def convt2x2_input_grad(dy, w):
    return _impl("convt").convt2x2_input_grad(dy, w)


def convt2x2_weight_grad(x, dy):
    return _impl("convt").convt2x2_weight_grad(x, dy)


def maxpool2_forward(x):
    return _impl("maxpool").maxpool2_forward(x)


def maxpool2_input_grad(dy, idx, h, w):
    return _impl("maxpool").maxpool2_input_grad(dy, idx, h, w)


def hausdorff_directed_sq(a_pts, b_pts):
    return _impl("hausdorff").hausdorff_directed_sq(a_pts, b_pts)
