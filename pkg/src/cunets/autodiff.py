"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray plus the closure that maps its output
gradient back onto its parents.  Graphs are built eagerly by the op
functions below and walked once, in reverse topological order, by
:func:`backward`.  Only the ops this model family needs exist here.

Activations are NHWC throughout.  Wrap code that never calls backward in
:func:`no_grad` to skip closure construction entirely.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ConfigurationError, InputError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, parents=(), bwd=None, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = parents
        self._bwd = bwd
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf tensor."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data, parents, bwd) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, parents, bwd)
    return Tensor(data)


def backward(root: Tensor, seed=None) -> None:
    """Accumulate ``grad`` on every reachable tensor with requires_grad."""
    if seed is None:
        seed = np.ones_like(root.data)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    root.grad = np.asarray(seed, dtype=root.data.dtype)
    for node in reversed(topo):
        if node._bwd is None or node.grad is None:
            continue
        grads = node._bwd(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
        node.grad = None  # interior gradients are spent; free them eagerly


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- basic ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise InputError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), bwd)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.maximum(x.data, 0)
    return _make(y, (x,), lambda g: (g * (y > 0),))


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable sigmoid, clamped to the open interval (0, 1).

    Without the clamp, float rounding sends saturated activations to
    exactly 0.0 or 1.0; outputs here stay strictly interior at the last
    representable values below 1 and above 0.
    """
    x = _as_tensor(x)
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0, e) / (1.0 + e)
    fi = np.finfo(d.dtype)
    np.clip(y, fi.tiny, 1.0 - fi.epsneg, out=y)

    def bwd(g):
        return (g * (y * (1.0 - y)),)

    return _make(y, (x,), bwd)


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    return _make(
        np.asarray(x.data.mean(), dtype=x.data.dtype),
        (x,),
        lambda g: (np.full_like(x.data, g / n),),
    )


# ----------------------------------------------------------- conv and pool


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None, dilation: int = 1) -> Tensor:
    """Stride-1 'same' zero-padded convolution, odd kernels only."""
    x = _as_tensor(x)
    k = kernel.data.shape[0]
    if k % 2 == 0:
        raise ConfigurationError(f"conv2d supports odd kernels, got {k}")
    if x.data.ndim != 4:
        raise InputError(f"conv2d expects NHWC input, got shape {x.data.shape}")
    if x.data.shape[3] != kernel.data.shape[2]:
        raise ConfigurationError(
            f"conv2d: input has {x.data.shape[3]} channels, kernel expects {kernel.data.shape[2]}"
        )
    b, h, w, cin = x.data.shape
    pad = dilation * (k // 2)
    if pad:
        xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    else:
        xp = x.data
    grads_needed = _grad_enabled and (x.requires_grad or kernel.requires_grad)
    if grads_needed:
        y, ctx = kernels.conv2d_forward_ctx(xp, kernel.data, dilation, h, w)
    else:
        y, ctx = kernels.conv2d_forward(xp, kernel.data, dilation, h, w), None
    if bias is not None:
        y += bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    padded_shape = (xp.shape[1], xp.shape[2])
    if ctx is not None:
        xp = None  # patch matrix supersedes the padded copy

    def bwd(g):
        g = np.ascontiguousarray(g)
        dw = kernels.conv2d_weight_grad_ctx(ctx, xp, g, k, dilation, cin)
        dxp = kernels.conv2d_input_grad(g, kernel.data, dilation, *padded_shape)
        dx = dxp[:, pad: pad + h, pad: pad + w, :] if pad else dxp
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 1, 2))

    return _make(y, parents, bwd)


def conv_transpose2x2(x: Tensor, kernel: Tensor, bias: Tensor | None) -> Tensor:
    """Kernel-2 stride-2 transposed convolution (exact 2x upsampling)."""
    x = _as_tensor(x)
    y = kernels.convt2x2_forward(x.data, kernel.data)
    if bias is not None:
        y += bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        g = np.ascontiguousarray(g)
        dx = kernels.convt2x2_input_grad(g, kernel.data)
        dw = kernels.convt2x2_weight_grad(x.data, g)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 1, 2))

    return _make(y, parents, bwd)


def maxpool2(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    b, h, w, c = x.data.shape
    if h % 2 or w % 2:
        raise InputError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    y, idx = kernels.maxpool2_forward(x.data)

    def bwd(g):
        return (kernels.maxpool2_input_grad(np.ascontiguousarray(g), idx, h, w),)

    return _make(y, (x,), bwd)


# ------------------------------------------------------------- batch norm


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.99,
    eps: float = 1e-3,
    update_stats: bool = True,
) -> Tensor:
    """Channel-wise batch normalization over (batch, height, width).

    Training mode normalizes with batch statistics (and optionally folds
    them into the running buffers in place); inference mode uses the
    running buffers, which then act as constants under differentiation.
    """
    x = _as_tensor(x)
    axes = (0, 1, 2)
    if training:
        d = x.data
        mu = d.mean(axis=axes)
        var = np.einsum("bhwc,bhwc->c", d, d) / (d.shape[0] * d.shape[1] * d.shape[2]) - mu * mu
        np.maximum(var, 0.0, out=var)
        inv = 1.0 / np.sqrt(var + eps)
        if update_stats:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mu
            running_var *= momentum
            running_var += (1.0 - momentum) * var
        # folded affine form: y = x * scale + shift (two passes, no xhat kept)
        scale = gamma.data * inv
        y = d * scale + (beta.data - mu * scale)
        n = d.shape[0] * d.shape[1] * d.shape[2]

        def bwd(g):
            xhat = (d - mu) * inv
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            # standard batchnorm input gradient with biased batch variance
            dx = (scale / n) * (n * g - dbeta - xhat * dgamma)
            return dx, dgamma, dbeta

        return _make(y, (x, gamma, beta), bwd)

    inv = 1.0 / np.sqrt(running_var + eps)
    scale = gamma.data * inv
    y = x.data * scale + (beta.data - running_mean * scale)

    def bwd_eval(g):
        xhat = (x.data - running_mean) * inv
        return g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(y, (x, gamma, beta), bwd_eval)


# ------------------------------------------------------------------- loss


BCE_EPS = 1e-7


def bce(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to [eps, 1-eps]."""
    pred = _as_tensor(pred)
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.data.shape:
        raise InputError(f"bce: shape mismatch {pred.data.shape} vs {t.shape}")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    n = p.size
    interior = (pred.data > BCE_EPS) & (pred.data < 1.0 - BCE_EPS)

    def bwd(g):
        dp = np.where(interior, (p - t) / (p * (1.0 - p) * n), 0.0)
        return (g * dp.astype(pred.data.dtype),)

    return _make(np.asarray(loss, dtype=pred.data.dtype), (pred,), bwd)
