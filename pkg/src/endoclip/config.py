"""Run configuration: one YAML file mirroring TrainConfig exactly.

Every section maps 1:1 onto a config dataclass; unknown keys are rejected so
typos fail loudly instead of silently training the wrong model. The ablation
arms differ only in the `toggles` section.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import yaml

from .augment import AugmentPolicy
from .encoders import ViTConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .lora import LoraConfig
from .objectives import LossWeights


@dataclass(frozen=True)
class Toggles:
    lora: bool = True
    mfa: bool = True
    sfa: bool = True


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    seed: int = 0
    temperature: float = 1.0
    sfa_per_batch: int | None = None  # default: batch_size // 2
    loss_weights: LossWeights = field(default_factory=LossWeights)
    lora: LoraConfig = field(default_factory=LoraConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    model: ViTConfig = field(default_factory=ViTConfig)
    toggles: Toggles = field(default_factory=Toggles)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError(
                f"epochs/batch_size out of range: {self.epochs}/{self.batch_size}")
        object.__setattr__(self, "betas", (float(b1), float(b2)))

    @property
    def sfa_count(self) -> int:
        return self.batch_size // 2 if self.sfa_per_batch is None else self.sfa_per_batch

    def to_dict(self) -> dict:
        raw = asdict(self)
        raw["betas"] = list(self.betas)
        raw["augment"]["horizontal_flip_classes"] = sorted(self.augment.horizontal_flip_classes)
        fusion = raw["fusion"]
        if fusion["selected_layers"] is not None:
            fusion["selected_layers"] = list(fusion["selected_layers"])
        return raw

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        kwargs = {}
        sections = {
            "loss_weights": LossWeights,
            "lora": LoraConfig,
            "fusion": FusionConfig,
            "augment": AugmentPolicy,
            "model": ViTConfig,
            "toggles": Toggles,
        }
        for key, klass in sections.items():
            if key in raw:
                kwargs[key] = _build_section(key, klass, raw.pop(key))
        if "betas" in raw:
            raw["betas"] = tuple(raw["betas"])
        scalar_names = {f.name for f in fields(cls)} - set(sections)
        unknown = set(raw) - scalar_names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs.update(raw)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config file must hold a mapping, got {type(raw).__name__}")
        return cls.from_dict(raw)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)


def _build_section(name: str, klass, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    known = {f.name for f in fields(klass)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    raw = dict(raw)
    if klass is FusionConfig and raw.get("selected_layers") is not None:
        raw["selected_layers"] = tuple(raw["selected_layers"])
    if klass is AugmentPolicy and "horizontal_flip_classes" in raw:
        raw["horizontal_flip_classes"] = frozenset(raw["horizontal_flip_classes"])
    return klass(**raw)
