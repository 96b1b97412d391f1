"""Training configuration tree, YAML loading and dotted-key overrides."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .audio import MelParams
from .losses import LossWeights, RoleMode
from .models import DetectorConfig, DiscriminatorConfig, GeneratorConfig

DEFAULT_LR = {RoleMode.OBSERVER: 2e-4, RoleMode.COLLABORATOR: 2e-5}


@dataclass
class TrainingConfig:
    mode: str = "observer"
    pool: list = field(default_factory=lambda: ["none"])
    batch_size: int = 16
    crop_len: int = 65536
    # None picks the role default: 2e-4 observer, 2e-5 collaborator
    lr_init: Optional[float] = None
    betas: list = field(default_factory=lambda: [0.8, 0.99])
    lr_decay: float = 0.999
    epochs: int = 20
    max_steps: Optional[int] = None
    clip_norm: float = 1.0
    seed: int = 0
    codec_workers: int = 1
    # None keeps every epoch checkpoint; n keeps the newest n
    keep_checkpoints: Optional[int] = None
    init_checkpoint: Optional[str] = None
    neural_codec: Optional[str] = None
    weights: LossWeights = field(default_factory=LossWeights)
    mel: MelParams = field(default_factory=MelParams)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self):
        self.mode = RoleMode(self.mode).value
        if self.lr_init is not None and self.lr_init < 0:
            raise ValueError("lr_init must be non-negative")
        if self.keep_checkpoints is not None and self.keep_checkpoints < 1:
            raise ValueError("keep_checkpoints must be >= 1")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.crop_len % self.generator.hop:
            raise ValueError(f"crop_len must be a multiple of the generator hop ({self.generator.hop})")
        if self.generator.hop != self.mel.hop:
            raise ValueError("product of generator upsample factors must equal the mel hop")
        if self.generator.n_mels != self.mel.n_mels:
            raise ValueError("generator n_mels must match mel params")

    @property
    def role(self) -> RoleMode:
        return RoleMode(self.mode)

    @property
    def lr(self) -> float:
        return DEFAULT_LR[self.role] if self.lr_init is None else self.lr_init


def toy_config(**overrides) -> TrainingConfig:
    """Desk-scale defaults: batch 4, 16384-sample crops, 1000 steps."""
    base = dict(batch_size=4, crop_len=16384, epochs=1000, max_steps=1000)
    base.update(overrides)
    return TrainingConfig(**base)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(cls, data: dict):
    """Build a (nested) config dataclass, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError(f"{cls.__name__} expects a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            value = from_dict(hint, value)
        kwargs[key] = value
    return cls(**kwargs)


def _set_dotted(tree: dict, key: str, value: Any, cls) -> None:
    head, _, rest = key.partition(".")
    names = {f.name: f for f in dataclasses.fields(cls)}
    if head not in names:
        raise KeyError(f"unknown config key {key!r}")
    hint = typing.get_type_hints(cls)[head]
    if rest:
        if not dataclasses.is_dataclass(hint):
            raise KeyError(f"config key {head!r} has no sub-keys (got {key!r})")
        _set_dotted(tree.setdefault(head, {}), rest, value, hint)
    else:
        tree[head] = value


def apply_overrides(data: dict, overrides, cls=TrainingConfig) -> dict:
    """Apply ``a.b=value`` strings to a raw config tree; values are parsed as YAML scalars."""
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        _set_dotted(data, key.strip(), yaml.safe_load(raw), cls)
    return data


def load_config(path=None, overrides=None, seed: Optional[int] = None) -> TrainingConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    return from_dict(TrainingConfig, data)


def dump_config(cfg: TrainingConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))
