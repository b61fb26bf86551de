"""The five-stage convolution path S0-S4.

S0 is a stride-1 3x3 stem; S1-S4 are stacks of MBConv blocks whose first
block halves the resolution.  With a 224² input the S2 tap is 56×56 and the
S4 tap is 14×14 (the same taps prose elsewhere calls "stage 3" and
"stage 5" when counting from one).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import (BatchNorm2d, ConfigError, Conv2d, Linear, Module, SqueezeExcitation,
                 global_avg_pool, se_width)
from .tensor import ShapeError, Tensor

EXPANSION = 4


@dataclass(frozen=True)
class MBConvBlockConfig:
    in_channels: int
    out_channels: int
    stride: int = 1
    expansion: int = EXPANSION
    se_ratio: float = 0.25

    @property
    def hidden(self) -> int:
        return self.in_channels * self.expansion

    @property
    def se_channels(self) -> int:
        return se_width(self.in_channels, self.se_ratio)

    @property
    def has_residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


@dataclass
class FeatureMap:
    tensor: Tensor
    stage: str

    @property
    def shape(self):
        return self.tensor.shape

    @property
    def side(self) -> int:
        return self.tensor.shape[2]


class Stem(Module):
    """3x3 conv (stride 1, pad 1) -> BN -> GeLU."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.conv = Conv2d(3, width, 3, rng, stride=1, padding=1)
        self.bn = BatchNorm2d(width)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"stem expects an RGB batch (B, 3, H, W), got {x.shape}")
        return T.gelu(self.bn(self.conv(x)))


class MBConv(Module):
    """1x1 expand -> BN/GeLU -> 3x3 depthwise -> BN/GeLU -> SE -> 1x1 project -> BN (+ residual)."""

    def __init__(self, cfg: MBConvBlockConfig, rng: np.random.Generator):
        if cfg.stride not in (1, 2):
            raise ConfigError(f"MBConv stride must be 1 or 2, got {cfg.stride}")
        self.cfg = cfg
        hid = cfg.hidden
        self.expand = Conv2d(cfg.in_channels, hid, 1, rng)
        self.bn1 = BatchNorm2d(hid)
        self.dw = Conv2d(hid, hid, 3, rng, stride=cfg.stride, padding=1, groups=hid)
        self.bn2 = BatchNorm2d(hid)
        self.se = SqueezeExcitation(hid, cfg.se_channels, rng)
        self.project = Conv2d(hid, cfg.out_channels, 1, rng)
        self.bn3 = BatchNorm2d(cfg.out_channels)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"MBConv expects {self.cfg.in_channels} channels, got {x.shape}")
        h = T.gelu(self.bn1(self.expand(x)))
        h = T.gelu(self.bn2(self.dw(h)))
        h = self.se(h)
        h = self.bn3(self.project(h))
        return h + x if self.cfg.has_residual else h


def stage_configs(stem_width: int, channels, blocks, se_ratio: float = 0.25) -> list[list[MBConvBlockConfig]]:
    stages = []
    cin = stem_width
    for cout, n in zip(channels, blocks):
        stage = []
        for i in range(n):
            stage.append(MBConvBlockConfig(cin, cout, stride=2 if i == 0 else 1, se_ratio=se_ratio))
            cin = cout
        stages.append(stage)
    return stages


class ConvPath(Module):
    """Stem + four MBConv stages + GAP/linear classifier.

    ``forward`` returns ``(s2, s4, logits)`` where the taps are the very
    tensors handed to the following stage.
    """

    def __init__(self, stem_width: int, channels, blocks, num_classes: int, rng: np.random.Generator,
                 se_ratio: float = 0.25):
        if len(channels) != 4 or len(blocks) != 4:
            raise ConfigError("conv path needs exactly four MBConv stages")
        if any(b < 1 for b in blocks):
            raise ConfigError(f"every stage needs at least one block, got {blocks}")
        self.stem_width = stem_width
        self.channels = tuple(channels)
        self.blocks = tuple(blocks)
        self.stem = Stem(stem_width, rng)
        self.stages = [[MBConv(c, rng) for c in stage] for stage in stage_configs(stem_width, channels, blocks, se_ratio)]
        self.head = Linear(channels[-1], num_classes, rng)

    def _children(self):
        yield "stem", self.stem
        for s, stage in enumerate(self.stages, start=1):
            for i, blk in enumerate(stage):
                yield f"stage{s}.{i}", blk
        yield "head", self.head

    def forward(self, x: Tensor):
        h = self.stem(x)
        taps = {}
        for s, stage in enumerate(self.stages, start=1):
            for blk in stage:
                h = blk(h)
            taps[s] = h
        s4 = taps[4]
        logits = self.head(global_avg_pool(s4))
        return taps[2], s4, logits

    def features(self, x: Tensor) -> tuple[FeatureMap, FeatureMap]:
        s2, s4, _ = self.forward(x)
        return FeatureMap(s2, "S2"), FeatureMap(s4, "S4")
