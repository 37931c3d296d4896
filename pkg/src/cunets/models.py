"""Assembly of the segmentation networks.

Five variants share one construction path:

``unet``
    Single encoder-decoder baseline with plain concatenation skips and a
    two-conv bottleneck.
``connected_unets``
    Two cascaded U-Nets.  The first net's decoder outputs feed the second
    net's encoder stages; both bottlenecks and the output head use atrous
    pyramid pooling.  Skips are plain concatenations.
``connected_resunets``
    Same wiring with residual encoder/decoder blocks.
``connected_unets_plus``
    Same wiring with every one of the 11 skip connections routed through
    a residual skip path (ResPath).
``connected_unets_plusplus``
    ResPaths plus widened multi-resolution encoder/decoder blocks.

Depth levels are numbered 1 (full resolution) through 4; decoders are
numbered in forward order, so decoder 1 sits at level 4.  Skip paths are
numbered 01-04 (first net), 05-07 (between the nets), 08-11 (second net).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .blocks import (
    ASPP,
    Bridge,
    Conv2D,
    ConvUnit,
    Module,
    ResPath,
    StandardBlock,
    Upsample2x,
    make_block,
    maxpool2,
)
from .errors import ConfigurationError, InputError
from .schedule import FilterSchedule

VARIANTS = (
    "unet",
    "connected_unets",
    "connected_resunets",
    "connected_unets_plus",
    "connected_unets_plusplus",
)

_BLOCK_KIND = {
    "unet": "standard",
    "connected_unets": "standard",
    "connected_resunets": "residual",
    "connected_unets_plus": "standard",
    "connected_unets_plusplus": "multires",
}

_ALIASES = {
    "plus": "connected_unets_plus",
    "plusplus": "connected_unets_plusplus",
    "resunets": "connected_resunets",
    "connected": "connected_unets",
}


def canonical_variant(name: str) -> str:
    key = name.strip().lower().replace("-", "_")
    key = _ALIASES.get(key, key)
    if key not in VARIANTS:
        raise ConfigurationError(f"unknown model variant {name!r}; choose from {VARIANTS}")
    return key


class _UNetBaseline(Module):
    def __init__(self, input_channels, schedule, order, *, rng, dtype):
        super().__init__()
        self.schedule = schedule
        widths = schedule.standard_block_filters
        ch = input_channels
        for lvl in (1, 2, 3, 4):
            setattr(self, f"enc{lvl}", make_block("standard", ch, lvl, schedule, order, rng=rng, dtype=dtype))
            ch = widths[lvl - 1]
        self.bottleneck = StandardBlock(widths[3], 2 * widths[3], order, rng=rng, dtype=dtype)
        ch = 2 * widths[3]
        for i, lvl in enumerate((4, 3, 2, 1), start=1):
            up = Upsample2x(ch, widths[lvl - 1], rng=rng, dtype=dtype)
            setattr(self, f"up{i}", up)
            block = make_block("standard", 2 * widths[lvl - 1], lvl, schedule, order, rng=rng, dtype=dtype)
            setattr(self, f"dec{i}", block)
            ch = widths[lvl - 1]
        self.head_conv = Conv2D(widths[0], 1, kernel_size=1, rng=rng, dtype=dtype)

    def forward(self, x, training=False, trace=None):
        def note(name, t):
            if trace is not None:
                trace[name] = t.data.shape
            return t

        e1 = note("enc1", self.enc1(x, training))
        e2 = note("enc2", self.enc2(maxpool2(e1), training))
        e3 = note("enc3", self.enc3(maxpool2(e2), training))
        e4 = note("enc4", self.enc4(maxpool2(e3), training))
        d = note("bottleneck", self.bottleneck(maxpool2(e4), training))
        for i, skip in enumerate((e4, e3, e2, e1), start=1):
            up = getattr(self, f"up{i}")(d, training)
            d = note(f"dec{i}", getattr(self, f"dec{i}")(ad.concat([up, skip]), training))
        return note("head", ad.sigmoid(self.head_conv(d, training)))


class _ConnectedNet(Module):
    def __init__(self, variant, input_channels, schedule: FilterSchedule, order,
                 aspp_merge, bridge_duplicate, *, rng, dtype):
        super().__init__()
        self.schedule = schedule
        kind = _BLOCK_KIND[variant]
        self.use_respaths = variant in ("connected_unets_plus", "connected_unets_plusplus")
        multires = kind == "multires"
        width = (schedule.multires_width if multires else schedule.standard_width)
        skipw = schedule.respath_filters
        upw = schedule.upsample_filters
        interw = schedule.inter_conv_filters
        bneck = schedule.aspp_bottleneck_filters

        def block(in_ch, lvl):
            return make_block(kind, in_ch, lvl, schedule, order, rng=rng, dtype=dtype)

        # first net: encoders, bottleneck, skip paths, decoders
        ch = input_channels
        for lvl in (1, 2, 3, 4):
            setattr(self, f"enc{lvl}", block(ch, lvl))
            ch = width(lvl)
        self.aspp1 = ASPP(width(4), bneck, schedule.aspp_dilations, aspp_merge, order, rng=rng, dtype=dtype)
        if self.use_respaths:
            for num, lvl in ((1, 1), (2, 2), (3, 3), (4, 4)):
                setattr(self, f"path{num:02d}",
                        ResPath(width(lvl), lvl, schedule, order, rng=rng, dtype=dtype))
        ch = bneck
        for i, lvl in enumerate((4, 3, 2, 1), start=1):
            setattr(self, f"up{i}", Upsample2x(ch, upw[lvl - 1], rng=rng, dtype=dtype))
            setattr(self, f"dec{i}", block(upw[lvl - 1] + skipw[lvl - 1], lvl))
            ch = width(lvl)

        # joint and second net
        self.bridge = Bridge(width(1), width(1), order, bridge_duplicate, rng=rng, dtype=dtype)
        self.enc5 = block(self.bridge.out_channels, 1)
        for i, lvl in ((1, 2), (2, 3), (3, 4)):
            setattr(self, f"inter{i}",
                    ConvUnit(width(lvl - 1), interw[i - 1], 3, order=order, rng=rng, dtype=dtype))
            if self.use_respaths:
                setattr(self, f"path{4 + i:02d}",
                        ResPath(width(lvl), lvl, schedule, order, rng=rng, dtype=dtype))
            setattr(self, f"enc{4 + lvl}", block(interw[i - 1] + skipw[lvl - 1], lvl))
        self.aspp2 = ASPP(width(4), bneck, schedule.aspp_dilations, aspp_merge, order, rng=rng, dtype=dtype)
        if self.use_respaths:
            for num, lvl in ((8, 1), (9, 2), (10, 3), (11, 4)):
                setattr(self, f"path{num:02d}",
                        ResPath(width(lvl), lvl, schedule, order, rng=rng, dtype=dtype))
        ch = bneck
        for i, lvl in zip((5, 6, 7, 8), (4, 3, 2, 1)):
            setattr(self, f"up{i}", Upsample2x(ch, upw[lvl - 1], rng=rng, dtype=dtype))
            setattr(self, f"dec{i}", block(upw[lvl - 1] + skipw[lvl - 1], lvl))
            ch = width(lvl)

        self.head_aspp = ASPP(width(1), schedule.aspp_output_filters,
                              schedule.aspp_dilations, aspp_merge, order, rng=rng, dtype=dtype)
        self.head_conv = Conv2D(schedule.aspp_output_filters, 1, kernel_size=1, rng=rng, dtype=dtype)

    def _skip(self, path_num: int, feat: Tensor, training: bool, note) -> Tensor:
        if not self.use_respaths:
            return feat
        name = f"path{path_num:02d}"
        return note(name, getattr(self, name)(feat, training))

    def forward(self, x, training=False, trace=None):
        def note(name, t):
            if trace is not None:
                trace[name] = t.data.shape
            return t

        e1 = note("enc1", self.enc1(x, training))
        e2 = note("enc2", self.enc2(maxpool2(e1), training))
        e3 = note("enc3", self.enc3(maxpool2(e2), training))
        e4 = note("enc4", self.enc4(maxpool2(e3), training))
        d = note("aspp1", self.aspp1(maxpool2(e4), training))

        dec_out = {}
        for i, (lvl, enc) in enumerate(zip((4, 3, 2, 1), (e4, e3, e2, e1)), start=1):
            up = getattr(self, f"up{i}")(d, training)
            skip = self._skip(lvl, enc, training, note)  # paths 01-04 are numbered by level
            d = note(f"dec{i}", getattr(self, f"dec{i}")(ad.concat([up, skip]), training))
            dec_out[lvl] = d

        joined = note("bridge", self.bridge(dec_out[1], training))
        e5 = note("enc5", self.enc5(joined, training))
        prev = e5
        encs2 = {1: e5}
        for i, lvl in ((1, 2), (2, 3), (3, 4)):
            pooled = maxpool2(prev)
            inter = note(f"inter{i}", getattr(self, f"inter{i}")(pooled, training))
            skip = self._skip(4 + i, dec_out[lvl], training, note)
            prev = note(f"enc{4 + lvl}", getattr(self, f"enc{4 + lvl}")(ad.concat([inter, skip]), training))
            encs2[lvl] = prev
        d = note("aspp2", self.aspp2(maxpool2(prev), training))

        for i, lvl in zip((5, 6, 7, 8), (4, 3, 2, 1)):
            up = getattr(self, f"up{i}")(d, training)
            skip = self._skip(lvl + 7, encs2[lvl], training, note)
            d = note(f"dec{i}", getattr(self, f"dec{i}")(ad.concat([up, skip]), training))

        d = note("head_aspp", self.head_aspp(d, training))
        return note("head", ad.sigmoid(self.head_conv(d, training)))


@dataclass
class ModelGraph:
    """A built network plus the configuration needed to rebuild it."""

    variant: str
    input_size: int
    input_channels: int
    seed: int
    net: Module
    dtype: str = "float32"
    options: dict = field(default_factory=dict)

    def forward_tensor(self, x: Tensor, training: bool = False, trace=None) -> Tensor:
        self._check_input(x.data)
        return self.net.forward(x, training, trace=trace)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        """Probability map for a NHWC batch (plain arrays in and out)."""
        x = np.asarray(x, dtype=self.dtype)
        self._check_input(x)
        if training:
            return self.net.forward(Tensor(x), True).data
        with ad.no_grad():
            return self.net.forward(Tensor(x), False).data

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4:
            raise InputError(f"expected NHWC input, got shape {x.shape}")
        if x.shape[1] != self.input_size or x.shape[2] != self.input_size:
            raise InputError(
                f"input is {x.shape[1]}x{x.shape[2]} but the graph was built for "
                f"{self.input_size}x{self.input_size}"
            )
        if x.shape[3] != self.input_channels:
            raise InputError(
                f"input has {x.shape[3]} channels, graph expects {self.input_channels}"
            )

    def respaths(self) -> list[tuple[str, int, int]]:
        """(name, chain length, filters) of every residual skip path."""
        return [
            (name, mod.length, mod.filters)
            for name, mod in self.net.named_modules()
            if isinstance(mod, ResPath)
        ]


def build_model(
    variant: str,
    input_size: int,
    seed: int = 0,
    input_channels: int = 1,
    dtype=np.float32,
    unit_order: str = "relu_bn",
    aspp_merge: str = "sum",
    bridge_duplicate: bool = True,
    schedule: Optional[FilterSchedule] = None,
) -> ModelGraph:
    variant = canonical_variant(variant)
    if input_size < 32 or input_size % 16:
        raise ConfigurationError(
            f"input_size must be a multiple of 16 and >= 32 (four pooling stages), got {input_size}"
        )
    if input_channels < 1:
        raise ConfigurationError(f"input_channels must be >= 1, got {input_channels}")
    schedule = schedule or FilterSchedule()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    if variant == "unet":
        net = _UNetBaseline(input_channels, schedule, unit_order, rng=rng, dtype=dtype)
    else:
        net = _ConnectedNet(variant, input_channels, schedule, unit_order,
                            aspp_merge, bridge_duplicate, rng=rng, dtype=dtype)
    return ModelGraph(
        variant=variant,
        input_size=input_size,
        input_channels=input_channels,
        seed=seed,
        net=net,
        dtype=dtype.name,
        options={
            "unit_order": unit_order,
            "aspp_merge": aspp_merge,
            "bridge_duplicate": bridge_duplicate,
        },
    )


def count_params(graph: ModelGraph) -> int:
    """Total trainable scalars: conv kernels, biases, BN scale/shift."""
    return graph.net.param_count()


def summarize(graph: ModelGraph) -> list[tuple[str, tuple, int]]:
    """Per top-level block: (name, output shape, trainable parameters).

    Runs a zero forward pass at the graph's input size (batch 1).
    """
    x = Tensor(np.zeros((1, graph.input_size, graph.input_size, graph.input_channels),
                        dtype=graph.dtype))
    trace: dict = {}
    with ad.no_grad():
        graph.net.forward(x, training=False, trace=trace)
    rows = []
    for name, shape in trace.items():
        mod = graph.net._children.get(name)
        if mod is None and name == "head":
            mod = graph.net._children.get("head_conv")
        n_params = mod.param_count() if mod is not None else 0
        if name.startswith("dec"):
            up = graph.net._children.get("up" + name[3:])
            if up is not None:
                n_params += up.param_count()
        rows.append((name, shape, n_params))
    return rows
