"""Plain-text ``key=value`` run configuration.

Files may contain blank lines and ``#`` comments.  Unknown keys are errors.
Command-line flags override file values; the merged result is what gets
written next to a run's outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .fusion import AKFConfig, CKFConfig
from .model import VariantConfig, preset
from .nn import ConfigError


@dataclass
class RunConfig:
    variant: str = "ctrlf-s"
    fusion: str = "akf"
    data: str = ""
    resolution: int = 0           # 0 keeps the variant default (224 for ctrlf-s and ctrlf-b)
    patch_large: int = 0          # 0 keeps the variant default
    patch_small: int = 0
    num_classes: int = 0          # 0 infers from the dataset
    epochs: int = 100
    batch_size: int = 32
    lr: float = 5e-4
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    seed: int = 0
    deterministic: bool = False
    out: str = "runs/ctrlf"
    dropout: float = 0.5
    alpha: float = 10.0
    ckf_k: int = 64
    train_ratio: float = 0.8
    augment: bool = True
    max_rotation: float = 15.0

    # -- (de)serialization ---------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().merged(parse_kv(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8", newline="\n")

    def merged(self, values: dict) -> "RunConfig":
        """Return a copy with ``values`` (strings or typed) applied."""
        known = {f.name: f for f in fields(self)}
        changes = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce(key, raw, type(getattr(self, key)))
        return dataclasses.replace(self, **changes)

    # -- views -----------------------------------------------------------------
    def variant_config(self, num_classes: int | None = None) -> VariantConfig:
        classes = num_classes or self.num_classes
        if not classes:
            raise ConfigError("number of classes unknown: set num_classes or point data at a dataset")
        cfg = preset(self.variant)
        cfg = cfg.replace(fusion=self.fusion, resolution=self.resolution or cfg.resolution, num_classes=classes,
                          akf=AKFConfig(alpha=self.alpha, total_epochs=max(self.epochs, 1)),
                          ckf=CKFConfig(k=self.ckf_k, dropout_rate=self.dropout))
        cfg = cfg.with_patches(self.patch_large or None, self.patch_small or None)
        cfg.validate()
        return cfg

    def train_config(self):
        from .training import TrainConfig

        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, base_lr=self.lr, min_lr=self.min_lr,
                           weight_decay=self.weight_decay, warmup_epochs=self.warmup_epochs, seed=self.seed,
                           deterministic=self.deterministic, augment=self.augment)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(key: str, raw, kind):
    if not isinstance(raw, str):
        return kind(raw)
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind.__name__})") from None
