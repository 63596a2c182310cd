"""Run configuration: model dimensions, module toggles and training settings.

Config files are JSON documents with optional ``model``, ``toggles`` and
``train`` sections plus top-level ``template``, ``data``, ``synthetic`` and
``out_dir`` keys. Every key has a default; see the README for the full list.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "a diseased plant with {class} marks"


@dataclass
class ModelConfig:
    image_size: int = 64
    patch: int = 8
    channels: int = 64
    heads: int = 4
    vit_depth: int = 2
    text_depth: int = 2
    mlp_ratio: int = 4
    adapter_r: int = 16
    adapter_alpha: float = 0.2
    feb_dim: int = 64
    feb_heads: int = 4
    cls_hidden: int = 64
    text_len: int = 12
    bn_momentum: float = 0.1

    @property
    def grid(self) -> int:
        return self.image_size // 8

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch) ** 2


@dataclass
class Toggles:
    """Module switches mirroring the ablation tables.

    ``affm_seq`` picks the long-range sub-branch inside the fusion module
    (``vlstm``, ``vit`` or ``none``); ``feb_kind`` picks the attention layer of
    the feature enhancer (``bima``, ``cross`` or ``cnn``).
    """

    text: bool = True
    cnn: bool = True
    vit: bool = True
    adapter: bool = True
    affm: bool = True
    feb: bool = True
    feb_kind: str = "bima"
    affm_seq: str = "vlstm"
    affm_dam: bool = True
    freeze_backbone: bool = True

    def validate(self) -> None:
        if not (self.cnn or self.vit):
            raise ConfigError("toggles.cnn and toggles.vit are both off; no visual branch left")
        if self.feb_kind not in ("bima", "cross", "cnn"):
            raise ConfigError(f"toggles.feb_kind must be bima, cross or cnn, got {self.feb_kind!r}")
        if self.affm_seq not in ("vlstm", "vit", "none"):
            raise ConfigError(f"toggles.affm_seq must be vlstm, vit or none, got {self.affm_seq!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 3.5e-5
    batch_size: int = 64
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    lr_schedule: str = "constant"
    step_gamma: float = 0.1
    step_every: int = 10
    seed: int = 0
    split_ratio: float = 0.8
    precision: str = "f32"

    def validate(self) -> None:
        if not 0 < self.split_ratio < 1:
            raise ConfigError("train.split_ratio must lie strictly between 0 and 1")
        if self.learning_rate < 0:
            raise ConfigError("train.learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("train.batch_size must be >= 1 and train.epochs >= 0")
        if self.lr_schedule not in ("constant", "step", "cosine"):
            raise ConfigError(f"train.lr_schedule must be constant, step or cosine, "
                              f"got {self.lr_schedule!r}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError("train.precision must be f32 or f64")


@dataclass
class SyntheticSpec:
    classes: int = 7
    per_class: int = 50
    size: int = 64
    seed: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    toggles: Toggles = field(default_factory=Toggles)
    train: TrainConfig = field(default_factory=TrainConfig)
    template: str = DEFAULT_TEMPLATE
    data: str | None = None
    synthetic: SyntheticSpec | None = None
    out_dir: str = "runs"

    def validate(self) -> "RunConfig":
        m = self.model
        problems = []
        if m.image_size % 8:
            problems.append(f"model.image_size={m.image_size} must be divisible by 8")
        if m.image_size % m.patch:
            problems.append(f"model.image_size={m.image_size} must be divisible by "
                            f"model.patch={m.patch}")
        if m.channels % m.heads:
            problems.append(f"model.channels={m.channels} must be divisible by "
                            f"model.heads={m.heads}")
        if m.feb_dim % m.feb_heads:
            problems.append(f"model.feb_dim={m.feb_dim} must be divisible by "
                            f"model.feb_heads={m.feb_heads}")
        if not 0.0 <= m.adapter_alpha <= 1.0:
            problems.append("model.adapter_alpha must lie in [0, 1]")
        if m.channels % 4:
            problems.append(f"model.channels={m.channels} must be divisible by 4 (fusion gate width)")
        if (self.toggles.cnn and self.toggles.vit and m.image_size % m.patch == 0
                and m.num_patches != m.grid ** 2):
            problems.append(f"model.patch={m.patch} must equal 8 so the patch grid matches the "
                            f"convolutional grid (model.image_size={m.image_size})")
        if "{class}" not in self.template.lower():
            problems.append("template must contain a {Class} placeholder")
        if problems:
            raise ConfigError("; ".join(problems))
        self.toggles.validate()
        self.train.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict, strict: bool = True) -> "RunConfig":
        doc = dict(doc or {})
        sections = {"model": ModelConfig, "toggles": Toggles, "train": TrainConfig}
        kwargs = {}
        for key, value in doc.items():
            if key in sections:
                kwargs[key] = _build(sections[key], value, key, strict)
            elif key == "synthetic":
                kwargs[key] = None if value is None else _build(SyntheticSpec, value, key, strict)
            elif key in ("template", "data", "out_dir"):
                kwargs[key] = value
            else:
                _unknown(key, strict)
        return cls(**kwargs).validate()


def _unknown(key: str, strict: bool) -> None:
    if strict:
        raise ConfigError(f"unknown config key {key!r}")
    log.warning("ignoring unknown config key %r", key)


def _build(kind, values, section: str, strict: bool):
    if not isinstance(values, dict):
        raise ConfigError(f"config section {section!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(kind)}
    kwargs = {}
    for key, value in values.items():
        if key in names:
            kwargs[key] = value
        else:
            _unknown(f"{section}.{key}", strict)
    return kind(**kwargs)


def load_run_config(path: str | Path | None, strict: bool = True) -> RunConfig:
    """Read a JSON run config; missing keys take their defaults."""
    if path is None:
        return RunConfig().validate()
    text = Path(path).read_text(encoding="utf-8")
    doc = json.loads(text) if text.strip() else {}
    return RunConfig.from_dict(doc, strict=strict)


def desk_config(**train_overrides) -> RunConfig:
    """Desk-scale preset used for the toy experiments."""
    train = TrainConfig(learning_rate=1e-3, batch_size=16, epochs=50, seed=0)
    for key, value in train_overrides.items():
        setattr(train, key, value)
    return RunConfig(train=train, synthetic=SyntheticSpec()).validate()
