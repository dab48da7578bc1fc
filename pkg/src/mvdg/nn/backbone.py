"""Truncated residual backbone for single-channel depth images.

The network is the familiar residual design cut short after its third
stage, for an overall stride of 16: a 7x7/2 stem with 3x3/2 max pooling,
then three stages at the base width, twice, and four times it. Cutting
at stride 16 keeps the final feature map tall enough to split into
strips; the full five-stage layout would leave too few rows.

Depths: 9 and 18 use basic blocks (1-1-1 and 2-2-2 per stage), 50 uses
bottleneck blocks (3-4-6) with expansion 4. Convolutions carry no bias
(normalization follows each one) and are initialized Kaiming-uniform
fan-in from a caller-supplied generator; normalization starts at scale 1,
shift 0.

Externally the backbone speaks (N, C, H, W); internally every layer runs
channels-last, which keeps window extraction and normalization on
contiguous channel runs. The input conversion is free (one channel) and
the output is converted back at the smallest feature map, so the detour
costs one small transpose per forward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import BadConfigError, ShapeMismatchError
from .layers import (
    BatchNorm2d,
    Conv2d,
    MaxPool2d,
    Module,
    ModuleList,
    relu,
    to_channels_first,
    to_channels_last,
)
from .tensor import Tensor, add

_STAGE_BLOCKS = {9: (1, 1, 1), 18: (2, 2, 2), 50: (3, 4, 6)}
_BOTTLENECK_EXPANSION = 4


@dataclass(frozen=True)
class BackboneConfig:
    """Shape contract for the backbone.

    width is the channel count of the first stage; stages run at width,
    2*width, 4*width. resolution is the expected square input size.
    """

    depth: int = 18
    width: int = 64
    in_channels: int = 1
    resolution: int = 128

    def __post_init__(self):
        if self.depth not in _STAGE_BLOCKS:
            raise BadConfigError(
                f"depth must be one of {sorted(_STAGE_BLOCKS)}, got {self.depth}"
            )
        if self.width < 1:
            raise BadConfigError(f"width must be positive, got {self.width}")
        if self.in_channels < 1:
            raise BadConfigError(f"in_channels must be positive, got {self.in_channels}")
        if self.resolution < 16 or self.resolution % 16 != 0:
            raise BadConfigError(
                f"resolution must be a positive multiple of 16, got {self.resolution}"
            )

    @property
    def out_channels(self) -> int:
        base = 4 * self.width
        if self.depth == 50:
            return base * _BOTTLENECK_EXPANSION
        return base

    @property
    def out_spatial(self) -> tuple[int, int]:
        side = self.resolution // 16
        return (side, side)


class BasicBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, *, rng):
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride, 1, channels_last=True, rng=rng)
        self.bn1 = BatchNorm2d(out_channels, channels_last=True)
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1, 1, channels_last=True, rng=rng)
        self.bn2 = BatchNorm2d(out_channels, channels_last=True)
        if stride != 1 or in_channels != out_channels:
            self.skip_conv = Conv2d(
                in_channels, out_channels, 1, stride, 0, channels_last=True, rng=rng
            )
            self.skip_bn = BatchNorm2d(out_channels, channels_last=True)
        else:
            self.skip_conv = None
            self.skip_bn = None

    def forward(self, x: Tensor) -> Tensor:
        out = relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        shortcut = x if self.skip_conv is None else self.skip_bn(self.skip_conv(x))
        return relu(add(out, shortcut))


class BottleneckBlock(Module):
    def __init__(self, in_channels: int, mid_channels: int, stride: int, *, rng):
        super().__init__()
        out_channels = mid_channels * _BOTTLENECK_EXPANSION
        self.conv1 = Conv2d(in_channels, mid_channels, 1, 1, 0, channels_last=True, rng=rng)
        self.bn1 = BatchNorm2d(mid_channels, channels_last=True)
        self.conv2 = Conv2d(mid_channels, mid_channels, 3, stride, 1, channels_last=True, rng=rng)
        self.bn2 = BatchNorm2d(mid_channels, channels_last=True)
        self.conv3 = Conv2d(mid_channels, out_channels, 1, 1, 0, channels_last=True, rng=rng)
        self.bn3 = BatchNorm2d(out_channels, channels_last=True)
        if stride != 1 or in_channels != out_channels:
            self.skip_conv = Conv2d(
                in_channels, out_channels, 1, stride, 0, channels_last=True, rng=rng
            )
            self.skip_bn = BatchNorm2d(out_channels, channels_last=True)
        else:
            self.skip_conv = None
            self.skip_bn = None

    def forward(self, x: Tensor) -> Tensor:
        out = relu(self.bn1(self.conv1(x)))
        out = relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        shortcut = x if self.skip_conv is None else self.skip_bn(self.skip_conv(x))
        return relu(add(out, shortcut))


class Backbone(Module):
    """Stem + three residual stages; input NCHW, output N x C x R/16 x R/16."""

    def __init__(self, config: BackboneConfig, *, rng: np.random.Generator):
        super().__init__()
        self.config = config
        w = config.width
        self.stem_conv = Conv2d(config.in_channels, w, 7, 2, 3, channels_last=True, rng=rng)
        self.stem_bn = BatchNorm2d(w, channels_last=True)
        self.stem_pool = MaxPool2d(3, 2, 1, channels_last=True)

        counts = _STAGE_BLOCKS[config.depth]
        bottleneck = config.depth == 50
        blocks = []
        in_ch = w
        for stage, (n_blocks, stage_width, stride) in enumerate(
            zip(counts, (w, 2 * w, 4 * w), (1, 2, 2))
        ):
            for b in range(n_blocks):
                s = stride if b == 0 else 1
                if bottleneck:
                    blocks.append(BottleneckBlock(in_ch, stage_width, s, rng=rng))
                    in_ch = stage_width * _BOTTLENECK_EXPANSION
                else:
                    blocks.append(BasicBlock(in_ch, stage_width, s, rng=rng))
                    in_ch = stage_width
        self.blocks = ModuleList(blocks)

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        expected = (cfg.in_channels, cfg.resolution, cfg.resolution)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ShapeMismatchError(
                f"backbone expects input (N, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {x.shape}"
            )
        out = to_channels_last(x)
        out = self.stem_pool(relu(self.stem_bn(self.stem_conv(out))))
        for block in self.blocks:
            out = block(out)
        return to_channels_first(out)


def build_backbone(config: BackboneConfig, rng: np.random.Generator) -> Backbone:
    return Backbone(config, rng=rng)
