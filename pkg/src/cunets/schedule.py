"""Per-depth filter schedules for the connected double U-Net family.

Depth levels run 1..4 from the full-resolution stage down to the last
stage before the bottleneck.  The residual skip paths get shorter and
wider with depth; the widened encoder/decoder blocks split their width
over three chained 3x3 convolutions whose filter counts sum to the width
of their 1x1 shortcut.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigurationError

LEVELS = (1, 2, 3, 4)


def check_level(level: int) -> int:
    if level not in LEVELS:
        raise ConfigurationError(f"block level must be in {LEVELS}, got {level}")
    return level


@dataclass(frozen=True)
class FilterSchedule:
    """Filter counts per depth level, plus the pyramid-pooling setup."""

    respath_filters: tuple[int, ...] = (32, 64, 128, 256)
    respath_lengths: tuple[int, ...] = (4, 3, 2, 1)
    multires_3x3_filters: tuple[tuple[int, int, int], ...] = (
        (8, 17, 26),
        (17, 35, 53),
        (35, 71, 106),
        (71, 142, 213),
    )
    multires_1x1_filters: tuple[int, ...] = (51, 105, 212, 426)
    standard_block_filters: tuple[int, ...] = (32, 64, 128, 256)
    aspp_bottleneck_filters: int = 512
    aspp_output_filters: int = 32
    aspp_dilations: tuple[int, ...] = (1, 6, 8, 12)
    # widths not pinned by the published tables; see models.py for context
    upsample_filters: tuple[int, ...] = field(default=(32, 64, 128, 256))
    inter_conv_filters: tuple[int, ...] = (64, 128, 256)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for idx, (triple, width) in enumerate(
            zip(self.multires_3x3_filters, self.multires_1x1_filters)
        ):
            if sum(triple) != width:
                raise ConfigurationError(
                    f"level {idx + 1}: 3x3 filters {triple} sum to {sum(triple)}, "
                    f"expected the 1x1 width {width}"
                )
        if list(self.respath_lengths) != sorted(self.respath_lengths, reverse=True) or len(
            set(self.respath_lengths)
        ) != len(self.respath_lengths):
            raise ConfigurationError(
                f"respath lengths must strictly decrease with depth, got {self.respath_lengths}"
            )
        for name in ("respath_filters", "respath_lengths", "multires_3x3_filters",
                     "multires_1x1_filters", "standard_block_filters", "upsample_filters"):
            if len(getattr(self, name)) != 4:
                raise ConfigurationError(f"{name} must have one entry per level (4)")

    def multires_triple(self, level: int) -> tuple[int, int, int]:
        return self.multires_3x3_filters[check_level(level) - 1]

    def multires_width(self, level: int) -> int:
        return self.multires_1x1_filters[check_level(level) - 1]

    def respath(self, level: int) -> tuple[int, int]:
        """(chain length, filters) of the residual skip path at this level."""
        check_level(level)
        return self.respath_lengths[level - 1], self.respath_filters[level - 1]

    def standard_width(self, level: int) -> int:
        return self.standard_block_filters[check_level(level) - 1]
