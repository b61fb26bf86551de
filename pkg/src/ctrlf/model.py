"""Variant presets and full-model assembly."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .convpath import ConvPath
from .fusion import AKF, CKF, AKFConfig, CKFConfig
from .mfca import MFCA, BranchConfig, MFCAConfig, valid_patch_sizes
from .nn import ConfigError, Module
from .tensor import Tensor


@dataclass(frozen=True)
class VariantConfig:
    name: str = "custom"
    blocks: tuple = (2, 2, 3, 5)
    channels: tuple = (32, 64, 128, 256)
    stem_width: int = 16
    mfca: MFCAConfig = field(default_factory=MFCAConfig)
    fusion: str = "akf"
    num_classes: int = 102
    resolution: int = 224
    se_ratio: float = 0.25
    akf: AKFConfig = field(default_factory=AKFConfig)
    ckf: CKFConfig = field(default_factory=CKFConfig)

    @property
    def s2_side(self) -> int:
        return self.resolution // 4

    @property
    def s4_side(self) -> int:
        return self.resolution // 16

    def replace(self, **changes) -> "VariantConfig":
        return dataclasses.replace(self, **changes)

    def with_patches(self, large: int | None = None, small: int | None = None) -> "VariantConfig":
        m = self.mfca
        lg = m.large if large is None else dataclasses.replace(m.large, patch_size=large)
        sm = m.small if small is None else dataclasses.replace(m.small, patch_size=small)
        return self.replace(mfca=dataclasses.replace(m, large=lg, small=sm))

    def validate(self) -> None:
        if self.fusion not in ("akf", "ckf"):
            raise ConfigError(f"fusion must be 'akf' or 'ckf', got {self.fusion!r}")
        if self.resolution <= 0 or self.resolution % 16:
            raise ConfigError(f"input resolution {self.resolution} is not divisible by 16")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        for branch, side in ((self.mfca.large, self.s2_side), (self.mfca.small, self.s4_side)):
            if side % branch.patch_size:
                raise ConfigError(
                    f"patch size {branch.patch_size} does not divide the {side}x{side} feature map; "
                    f"valid patch sizes: {valid_patch_sizes(side)}")


CTRLF_S = VariantConfig(
    name="ctrlf-s",
    blocks=(2, 2, 3, 5),
    channels=(32, 64, 128, 256),
    stem_width=16,
    mfca=MFCAConfig(small=BranchConfig(2, 128, 3, 12), large=BranchConfig(8, 256, 3, 4), rounds=2, heads=6),
)

CTRLF_B = VariantConfig(
    name="ctrlf-b",
    blocks=(2, 2, 4, 8),
    channels=(64, 92, 196, 256),
    stem_width=16,
    mfca=MFCAConfig(small=BranchConfig(2, 192, 3, 12), large=BranchConfig(8, 384, 3, 4), rounds=4, heads=6),
)

# small enough to overfit in seconds on CPU
TINY = VariantConfig(
    name="tiny",
    blocks=(1, 1, 1, 1),
    channels=(8, 16, 32, 64),
    stem_width=4,
    mfca=MFCAConfig(small=BranchConfig(1, 32, 3, 12), large=BranchConfig(4, 64, 3, 4), rounds=1, heads=6),
    num_classes=8,
    resolution=32,
)

PRESETS = {"ctrlf-s": CTRLF_S, "ctrlf-b": CTRLF_B, "tiny": TINY}


def preset(name: str, **overrides) -> VariantConfig:
    try:
        cfg = PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(PRESETS)}") from None
    return cfg.replace(**overrides) if overrides else cfg


class CTRLF(Module):
    """Conv path + MFCA + fusion head.

    ``forward`` returns ``(fused, cnn_logits, trans_output)``; ``fused`` is the
    pre-softmax score vector of the fusion head.
    """

    def __init__(self, cfg: VariantConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.conv = ConvPath(cfg.stem_width, cfg.channels, cfg.blocks, cfg.num_classes, rng, cfg.se_ratio)
        self.mfca = MFCA(cfg.mfca, (cfg.channels[1], cfg.s2_side), (cfg.channels[3], cfg.s4_side),
                         cfg.num_classes, rng)
        if cfg.fusion == "akf":
            self.fusion = AKF(cfg.akf)
        else:
            self.fusion = CKF(cfg.num_classes, cfg.num_classes, cfg.num_classes, cfg.ckf, rng)
        self.name_scopes()

    def forward(self, x) -> tuple[Tensor, Tensor, Tensor]:
        x = T.as_tensor(x)
        s2, s4, cnn_logits = self.conv(x)
        trans = self.mfca(s2, s4)
        return self.fusion(cnn_logits, trans), cnn_logits, trans

    def set_lambda(self, lam: float) -> None:
        if isinstance(self.fusion, AKF):
            self.fusion.lam = float(lam)

    @property
    def lam(self) -> float | None:
        return self.fusion.lam if isinstance(self.fusion, AKF) else None


def build_model(cfg: VariantConfig, seed: int = 0) -> CTRLF:
    return CTRLF(cfg, seed)
