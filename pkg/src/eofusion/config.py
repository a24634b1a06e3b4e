"""Run configuration: one JSON document, schema-validated, with dotted-path
CLI overrides. Unknown keys are rejected so provenance hashes stay honest."""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_type_hints

from .autoencoder import ModalityConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .gpp import GPPModelConfig
from .sampling import EligibilityPolicy, SamplingScheme
from .trainer import TrainConfig

DATA_ROOT_ENV = "EOFUSION_DATA_ROOT"


@dataclass
class SynthSection:
    n_scenes: int = 15
    height: int = 18
    width: int = 18
    classes: int = 2
    s2_frames: int = 48
    s1_frames: int = 80
    noise: float = 0.0
    amp_range: list = field(default_factory=lambda: [0.05, 0.2])
    cloud_fraction: float = 0.0
    world_seed: int | None = 7

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")
        if self.classes < 2 or not 0.0 <= self.cloud_fraction < 1.0:
            raise ValueError("need >= 2 classes and cloud_fraction in [0, 1)")
        if self.s1_frames < self.s2_frames:
            raise ValueError("s1_frames must be >= s2_frames")


@dataclass
class SchemeSection:
    sequence_length: int = 20
    temporal_stride: int = 17
    spatial_stride: int = 9
    frames_selected: int = 11

    def __post_init__(self):
        self.build()

    def build(self) -> SamplingScheme:
        return SamplingScheme(self.sequence_length, self.temporal_stride,
                              self.spatial_stride, self.frames_selected)


@dataclass
class SamplingSection:
    s1: SchemeSection = field(default_factory=lambda: SchemeSection(40, 40, 15))
    s2: SchemeSection = field(default_factory=SchemeSection)
    fractions: list = field(default_factory=lambda: [0.75, 0.17, 0.08])
    min_patch_valid_fraction: float = 1.0
    require_center_valid: bool = True

    def policy(self) -> EligibilityPolicy:
        return EligibilityPolicy(self.min_patch_valid_fraction, self.require_center_valid)


@dataclass
class ModelSection:
    conv_channels: list = field(default_factory=lambda: [8, 16, 32])
    cbam_reduction: int = 8
    multiscale_kernels: list = field(default_factory=lambda: [1, 3, 5])
    temporal_layers: int = 1
    temporal_heads: int = 4
    dropout: float = 0.0
    latent_dim: int | None = None

    def __post_init__(self):
        self.build("S1")

    def build(self, modality: str) -> ModalityConfig:
        overrides = dict(
            conv_channels=tuple(self.conv_channels),
            cbam_reduction=self.cbam_reduction,
            multiscale_kernels=tuple(self.multiscale_kernels),
            temporal_layers=self.temporal_layers,
            temporal_heads=self.temporal_heads,
            dropout=self.dropout,
        )
        cfg = ModalityConfig.for_modality(modality, **overrides)
        if self.latent_dim is not None:
            cfg = dataclasses.replace(cfg, latent_dim=self.latent_dim)
        return cfg


@dataclass
class FusionSection:
    fused_dim: int = 7
    projection_dim: int = 16
    transformer_layers: int = 2
    transformer_heads: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        self.build()

    def build(self, fused_dim: int | None = None) -> FusionConfig:
        return FusionConfig(fused_dim or self.fused_dim, self.projection_dim,
                            self.transformer_layers, self.transformer_heads,
                            self.dropout)


@dataclass
class TrainSection:
    batch_size: int = 8
    max_epochs: int = 60
    learning_rate: float = 1e-3
    lr_plateau_patience: int = 10
    early_stop_patience: int = 25
    resample_frames_per_epoch: bool = True
    deterministic: bool = True

    def __post_init__(self):
        self.build("PRETRAIN_S1", 0)

    def build(self, stage: str, seed: int) -> TrainConfig:
        return TrainConfig(
            stage=stage, batch_size=self.batch_size, max_epochs=self.max_epochs,
            learning_rate=self.learning_rate,
            lr_plateau_patience=self.lr_plateau_patience,
            early_stop_patience=self.early_stop_patience, seed=seed,
            resample_frames_per_epoch=self.resample_frames_per_epoch,
            deterministic=self.deterministic,
        )


@dataclass
class GPPSection:
    sites: int = 3
    window: int = 90
    stride: int = 10
    qc_threshold: float = 0.7
    footprint_half_size: int = 1
    epochs: int = 60
    learning_rate: float = 1e-3
    batch_size: int = 32
    model_dim: int = 32
    heads: int = 4
    encoder_blocks: int = 4
    dropout: float = 0.1

    def __post_init__(self):
        self.build_model_config()
        if not 60 <= self.window <= 120 or self.stride < 1:
            raise ValueError("window must lie in [60, 120] with stride >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.sites < 1:
            raise ValueError("gpp training settings must be positive")

    def build_model_config(self) -> GPPModelConfig:
        return GPPModelConfig(input_dim=7, encoder_blocks=self.encoder_blocks,
                              heads=self.heads, model_dim=self.model_dim,
                              dropout=self.dropout)


@dataclass
class EmbedSection:
    pixel_batch: int = 256
    frames: list | None = None  # null embeds the full timeline


@dataclass
class RunConfig:
    seed: int = 0
    data_root: str = "runs/toy"
    synth: SynthSection = field(default_factory=SynthSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    model_s1: ModelSection = field(default_factory=ModelSection)
    model_s2: ModelSection = field(default_factory=ModelSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    train_s1: TrainSection = field(default_factory=TrainSection)
    train_s2: TrainSection = field(default_factory=TrainSection)
    train_fusion: TrainSection = field(default_factory=TrainSection)
    gpp: GPPSection = field(default_factory=GPPSection)
    embed: EmbedSection = field(default_factory=EmbedSection)

    def root(self) -> Path:
        return Path(os.environ.get(DATA_ROOT_ENV, "")) / self.data_root \
            if os.environ.get(DATA_ROOT_ENV) else Path(self.data_root)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


def _build_section(cls, data, path="config"):
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must be an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys under {path}: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        target = hints.get(f.name)
        if dataclasses.is_dataclass(target) and isinstance(value, dict):
            kwargs[f.name] = _build_section(target, value, f"{path}.{f.name}")
        else:
            kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value under {path}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    return _build_section(RunConfig, data)


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Load a JSON run config; `overrides` are dotted key=value assignments."""
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key.path=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw  # bare strings
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override through non-object key {part!r}")
        node[parts[-1]] = value
    return config_from_dict(data)
