"""Differentiable building blocks and the small module system they live in.

A :class:`Module` owns named :class:`~cunets.autodiff.Parameter` leaves,
named buffers (batch-norm running statistics), and named child modules;
``named_parameters`` flattens the tree into slash-separated paths that
double as checkpoint keys.

Block conventions, applied consistently:

* conv units default to conv -> ReLU -> BN (``unit_order="relu_bn"``);
  the conventional conv -> BN -> ReLU remains available per model via
  ``unit_order="bn_relu"``.
* 1x1 shortcut convolutions feed a BN with no activation and carry no
  bias: a bias immediately followed by BN is cancelled by the mean
  subtraction and would be a dead parameter.
* all stride-1 convolutions are zero-padded 'same'; spatial dims are
  preserved everywhere except pooling (halves) and the 2x2 transposed
  conv (doubles).
"""

from __future__ import annotations

import math
import warnings
from contextlib import contextmanager

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigurationError
from .schedule import FilterSchedule, check_level

UNIT_ORDERS = ("relu_bn", "bn_relu")

_update_bn_stats = True


@contextmanager
def frozen_bn_stats():
    """Suppress running-stat updates (used by gradient checking)."""
    global _update_bn_stats
    prev = _update_bn_stats
    _update_bn_stats = False
    try:
        yield
    finally:
        _update_bn_stats = prev


def bn_updates_enabled() -> bool:
    return _update_bn_stats


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Tree of parameters, buffers, and submodules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        self._buffers[name] = array
        object.__setattr__(self, name, array)
        return array

    def named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, child in self._children.items():
            sub = f"{prefix}/{name}" if prefix else name
            yield from child.named_modules(sub)

    def named_parameters(self, prefix: str = ""):
        for path, mod in self.named_modules(prefix):
            for name, p in mod._params.items():
                yield (f"{path}/{name}" if path else name), p

    def named_buffers(self, prefix: str = ""):
        for path, mod in self.named_modules(prefix):
            for name, b in mod._buffers.items():
                yield (f"{path}/{name}" if path else name), b

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return self.forward(x, training)

    def forward(self, x: Tensor, training: bool) -> Tensor:  # pragma: no cover
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._items = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module) -> Module:
        self._children[str(len(self._items))] = mod
        self._items.append(mod)
        return mod

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Conv2D(Module):
    """Bare stride-1 'same' convolution with optional bias."""

    def __init__(self, in_ch, filters, kernel_size=3, dilation=1, bias=True, *, rng, dtype):
        super().__init__()
        if kernel_size not in (1, 3):
            raise ConfigurationError(f"stride-1 conv kernel must be 1 or 3, got {kernel_size}")
        if filters < 1 or dilation < 1:
            raise ConfigurationError(f"invalid conv config: filters={filters} dilation={dilation}")
        self.in_ch = in_ch
        self.filters = filters
        self.kernel_size = kernel_size
        self.dilation = dilation
        fan_in = kernel_size * kernel_size * in_ch
        self.kernel = Parameter(he_uniform(rng, (kernel_size, kernel_size, in_ch, filters), fan_in, dtype))
        self.bias = Parameter(np.zeros(filters, dtype=dtype)) if bias else None

    def forward(self, x, training=False):
        return ad.conv2d(x, self.kernel, self.bias, self.dilation)


class BatchNorm(Module):
    def __init__(self, channels, *, momentum=0.99, eps=1e-3, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x, training=False):
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=training, momentum=self.momentum, eps=self.eps,
            update_stats=_update_bn_stats,
        )


class ConvUnit(Module):
    """Convolution plus its activation/normalization tail.

    ``activation=False, batchnorm=True, bias=False`` is the shortcut-branch
    configuration; the default is a full conv unit in the model-wide order.
    """

    def __init__(self, in_ch, filters, kernel_size=3, dilation=1,
                 activation=True, batchnorm=True, bias=True,
                 order="relu_bn", *, rng, dtype):
        super().__init__()
        if order not in UNIT_ORDERS:
            raise ConfigurationError(f"unit order must be one of {UNIT_ORDERS}, got {order!r}")
        self.order = order
        self.has_activation = activation
        self.has_batchnorm = batchnorm
        self.filters = filters
        self.conv = Conv2D(in_ch, filters, kernel_size, dilation, bias=bias, rng=rng, dtype=dtype)
        self.bn = BatchNorm(filters, dtype=dtype) if batchnorm else None

    def forward(self, x, training=False):
        y = self.conv(x, training)
        first, second = (("relu", "bn") if self.order == "relu_bn" else ("bn", "relu"))
        for stage in (first, second):
            if stage == "relu" and self.has_activation:
                y = ad.relu(y)
            elif stage == "bn" and self.bn is not None:
                y = self.bn(y, training)
        return y


class _AddActNorm(Module):
    """Shared residual-merge tail: elementwise add, then ReLU/BN."""

    def __init__(self, channels, order, *, dtype):
        super().__init__()
        self.order = order
        self.bn = BatchNorm(channels, dtype=dtype)

    def forward_pair(self, a, b, training):
        y = ad.add(a, b)
        if self.order == "relu_bn":
            return self.bn(ad.relu(y), training)
        return ad.relu(self.bn(y, training))


class MultiResBlock(Module):
    """Widened encoder/decoder block: three chained 3x3 convs whose outputs
    are channel-concatenated and summed with a 1x1 shortcut of the input."""

    def __init__(self, in_ch, level, schedule: FilterSchedule, order="relu_bn", *, rng, dtype):
        super().__init__()
        self.level = check_level(level)
        f1, f2, f3 = schedule.multires_triple(level)
        self.width = schedule.multires_width(level)
        self.c1 = ConvUnit(in_ch, f1, 3, order=order, rng=rng, dtype=dtype)
        self.c2 = ConvUnit(f1, f2, 3, order=order, rng=rng, dtype=dtype)
        self.c3 = ConvUnit(f2, f3, 3, order=order, rng=rng, dtype=dtype)
        self.shortcut = ConvUnit(in_ch, self.width, 1, activation=False, bias=False,
                                 order=order, rng=rng, dtype=dtype)
        self.merge = _AddActNorm(self.width, order, dtype=dtype)

    def forward(self, x, training=False):
        a = self.c1(x, training)
        b = self.c2(a, training)
        c = self.c3(b, training)
        stacked = ad.concat([a, b, c])
        return self.merge.forward_pair(stacked, self.shortcut(x, training), training)


class StandardBlock(Module):
    """Plain two-conv U-Net block."""

    def __init__(self, in_ch, filters, order="relu_bn", *, rng, dtype):
        super().__init__()
        if filters < 1:
            raise ConfigurationError(f"filters must be >= 1, got {filters}")
        self.width = filters
        self.c1 = ConvUnit(in_ch, filters, 3, order=order, rng=rng, dtype=dtype)
        self.c2 = ConvUnit(filters, filters, 3, order=order, rng=rng, dtype=dtype)

    def forward(self, x, training=False):
        return self.c2(self.c1(x, training), training)


class ResidualBlock(Module):
    """Two-conv block with a 1x1 projection shortcut around it."""

    def __init__(self, in_ch, filters, order="relu_bn", *, rng, dtype):
        super().__init__()
        self.width = filters
        self.c1 = ConvUnit(in_ch, filters, 3, order=order, rng=rng, dtype=dtype)
        self.c2 = ConvUnit(filters, filters, 3, order=order, rng=rng, dtype=dtype)
        self.shortcut = ConvUnit(in_ch, filters, 1, activation=False, bias=False,
                                 order=order, rng=rng, dtype=dtype)
        self.merge = _AddActNorm(filters, order, dtype=dtype)

    def forward(self, x, training=False):
        y = self.c2(self.c1(x, training), training)
        return self.merge.forward_pair(y, self.shortcut(x, training), training)


class ResPathUnit(Module):
    def __init__(self, in_ch, filters, order, *, rng, dtype):
        super().__init__()
        self.main = ConvUnit(in_ch, filters, 3, order=order, rng=rng, dtype=dtype)
        self.shortcut = ConvUnit(in_ch, filters, 1, activation=False, bias=False,
                                 order=order, rng=rng, dtype=dtype)
        self.merge = _AddActNorm(filters, order, dtype=dtype)

    def forward(self, x, training=False):
        return self.merge.forward_pair(self.main(x, training), self.shortcut(x, training), training)


class ResPath(Module):
    """Residual skip connection: a chain of conv units, each a 3x3 conv
    summed with a parallel 1x1 conv of the unit input, then ReLU + BN.

    The chain shortens with depth (4/3/2/1 units at levels 1..4) because
    the encoder-decoder semantic gap narrows toward the bottleneck.
    """

    def __init__(self, in_ch, level, schedule: FilterSchedule, order="relu_bn", *, rng, dtype):
        super().__init__()
        self.level = check_level(level)
        self.length, self.filters = schedule.respath(level)
        units = []
        ch = in_ch
        for _ in range(self.length):
            units.append(ResPathUnit(ch, self.filters, order, rng=rng, dtype=dtype))
            ch = self.filters
        self.units = ModuleList(units)

    def forward(self, x, training=False):
        for unit in self.units:
            x = unit(x, training)
        return x


class ASPP(Module):
    """Atrous pyramid: parallel 3x3 convs at dilations (1, 6, 8, 12),
    merged and projected by a 1x1 conv.

    ``merge="sum"`` adds the branches (the default; it reproduces the
    published parameter budgets), ``merge="concat"`` stacks them before
    the projection.
    """

    def __init__(self, in_ch, filters, dilations=(1, 6, 8, 12), merge="sum",
                 order="relu_bn", *, rng, dtype):
        super().__init__()
        if merge not in ("sum", "concat"):
            raise ConfigurationError(f"ASPP merge must be 'sum' or 'concat', got {merge!r}")
        self.filters = filters
        self.dilations = tuple(dilations)
        self.merge = merge
        self.branches = ModuleList(
            ConvUnit(in_ch, filters, 3, dilation=d, order=order, rng=rng, dtype=dtype)
            for d in self.dilations
        )
        proj_in = filters if merge == "sum" else filters * len(self.dilations)
        self.project = ConvUnit(proj_in, filters, 1, order=order, rng=rng, dtype=dtype)
        self._warned = False

    def forward(self, x, training=False):
        h, w = x.data.shape[1], x.data.shape[2]
        extent = 2 * max(self.dilations) + 1
        if (h < extent or w < extent) and not self._warned:
            warnings.warn(
                f"ASPP input {h}x{w} is smaller than the {extent}x{extent} extent of its most "
                f"dilated 3x3 tap; zero padding covers the overhang", stacklevel=2)
            self._warned = True
        outs = [branch(x, training) for branch in self.branches]
        merged = outs[0]
        if self.merge == "sum":
            for o in outs[1:]:
                merged = ad.add(merged, o)
        else:
            merged = ad.concat(outs)
        return self.project(merged, training)


class Upsample2x(Module):
    """2x2 stride-2 transposed convolution; doubles spatial dims exactly."""

    def __init__(self, in_ch, filters, *, rng, dtype):
        super().__init__()
        self.filters = filters
        self.kernel = Parameter(he_uniform(rng, (2, 2, in_ch, filters), 4 * in_ch, dtype))
        self.bias = Parameter(np.zeros(filters, dtype=dtype))

    def forward(self, x, training=False):
        h, w = x.data.shape[1], x.data.shape[2]
        if h % 2 or w % 2:
            raise ConfigurationError(f"upsampling needs even input dims, got {h}x{w}")
        return ad.conv_transpose2x2(x, self.kernel, self.bias)


class Bridge(Module):
    """Joint between the two U-Nets: 3x3 conv of the first net's final
    decoder output, concatenated with itself (or, optionally, with the
    pre-conv features), then ReLU + BN."""

    def __init__(self, in_ch, filters, order="relu_bn", duplicate=True, *, rng, dtype):
        super().__init__()
        self.duplicate = duplicate
        self.order = order
        self.conv = Conv2D(in_ch, filters, 3, rng=rng, dtype=dtype)
        out_ch = 2 * filters if duplicate else filters + in_ch
        self.out_channels = out_ch
        self.bn = BatchNorm(out_ch, dtype=dtype)

    def forward(self, x, training=False):
        y = self.conv(x, training)
        y = ad.concat([y, y] if self.duplicate else [y, x])
        if self.order == "relu_bn":
            return self.bn(ad.relu(y), training)
        return ad.relu(self.bn(y, training))


def maxpool2(x: Tensor) -> Tensor:
    return ad.maxpool2(x)


def make_block(kind: str, in_ch: int, level: int, schedule: FilterSchedule,
               order: str, *, rng, dtype) -> Module:
    """Encoder/decoder block factory: standard | residual | multires."""
    if kind == "multires":
        return MultiResBlock(in_ch, level, schedule, order, rng=rng, dtype=dtype)
    width = schedule.standard_width(level)
    if kind == "standard":
        return StandardBlock(in_ch, width, order, rng=rng, dtype=dtype)
    if kind == "residual":
        return ResidualBlock(in_ch, width, order, rng=rng, dtype=dtype)
    raise ConfigurationError(f"unknown block kind {kind!r}")
