"""Experiment configuration: model, loss, training and inference settings.

Configs load from JSON with strict key checking (unknown keys are rejected
with their path) and validate cross-field constraints on construction.
Defaults are the desk-scale toy setup; the full-scale values from the
reference setup (448 px input, 30-frame clips, 256 channels, anchors
16/32/64/128) remain expressible, see ``full_scale_config``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError


@dataclass
class ModelConfig:
    input_side: int = 64
    clip_len: int = 8
    channels: int = 64
    patch_stride: int = 8
    encoder_blocks: int = 1
    n_heads: int = 2
    ffn_mult: int = 4
    spatial_layers: int = 1
    temporal_layers: int = 3
    window_half: int = 2          # temporal window length = 2 * window_half + 1
    global_window: bool = False   # ablation: every frame attends every frame
    downsample_strides: list[int] = field(default_factory=lambda: [1])
    downsample_channels: int = 64
    head_width: int = 64
    head_blocks: int = 3
    anchor_base_sizes: list[float] = field(default_factory=lambda: [10, 16, 24, 36])
    anchor_aspect_ratios: list[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    pos_embed_learnable: bool = True

    @property
    def feature_side(self) -> int:
        return self.input_side // self.patch_stride

    @property
    def stride_product(self) -> int:
        return int(np.prod(self.downsample_strides)) if self.downsample_strides else 1

    @property
    def down_side(self) -> int:
        return self.feature_side // self.stride_product

    @property
    def anchor_stride(self) -> float:
        return self.input_side / self.down_side

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_base_sizes) * len(self.anchor_aspect_ratios)

    @property
    def n_anchors(self) -> int:
        return self.down_side * self.down_side * self.anchors_per_cell

    @property
    def window_length(self) -> int:
        return 2 * self.window_half + 1

    def validate(self) -> None:
        if self.input_side % self.patch_stride:
            raise ConfigurationError("input_side must be divisible by patch_stride")
        if self.feature_side % self.stride_product:
            raise ConfigurationError("feature side must be divisible by the "
                                     "downsample stride product")
        if self.channels % self.n_heads or self.downsample_channels % self.n_heads:
            raise ConfigurationError("channel widths must be divisible by n_heads")
        if self.window_half < 0:
            raise ConfigurationError("window_half must be >= 0")
        if self.clip_len < 1:
            raise ConfigurationError("clip_len must be >= 1")
        if self.head_blocks < 2:
            raise ConfigurationError("heads need at least 2 convolution blocks")
        if not self.anchor_base_sizes or not self.anchor_aspect_ratios:
            raise ConfigurationError("anchor sizes/ratios must be non-empty")


@dataclass
class LossConfig:
    lambda_prob: float = 1.0
    lambda_giou: float = 0.3
    iou_threshold: float = 0.2
    neg_pos_ratio: int = 3
    mode: str = "bce_hnm"         # bce_hnm | focal | bce
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    hnm_min_negatives: int = 16   # top-K floor when a batch has no positives
    bbox_reduction: str = "mean"  # mean | sum over positive anchors

    def validate(self) -> None:
        if self.lambda_prob < 0 or self.lambda_giou < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if not 0.0 < self.iou_threshold < 1.0:
            raise ConfigurationError("iou_threshold must be in (0, 1)")
        if self.neg_pos_ratio < 1:
            raise ConfigurationError("neg_pos_ratio must be >= 1")
        if self.mode not in ("bce_hnm", "focal", "bce"):
            raise ConfigurationError(f"unknown loss mode {self.mode!r}")
        if self.bbox_reduction not in ("mean", "sum"):
            raise ConfigurationError(f"unknown bbox_reduction {self.bbox_reduction!r}")
        if self.hnm_min_negatives < 1:
            raise ConfigurationError("hnm_min_negatives must be >= 1")


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    peak_lr: float = 1e-4
    weight_decay: float = 0.05
    warmup_iters: int = 100
    seed: int = 0
    fps: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    augment: bool = True
    jitter_strength: float = 0.2
    flip_prob: float = 0.5
    crop_min_scale: float = 0.7   # 1.0 disables random resized cropping
    checkpoint_every: int = 1000
    log_every: int = 10

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not 0 <= self.warmup_iters <= self.iterations:
            raise ConfigurationError("warmup_iters must be within [0, iterations]")
        if not 0.0 < self.crop_min_scale <= 1.0:
            raise ConfigurationError("crop_min_scale must be in (0, 1]")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigurationError("flip_prob must be in [0, 1]")
        if self.jitter_strength < 0 or self.jitter_strength >= 1:
            raise ConfigurationError("jitter_strength must be in [0, 1)")


@dataclass
class InferenceConfig:
    phi: float = 0.0              # absolute pre-filter on frame scores; 0 disables
    median_window: int = 5
    peak_ratio: float = 0.8       # keep peaks >= peak_ratio * highest peak
    extent_ratio: float = 0.7     # track extent: smoothed >= extent_ratio * last peak

    def validate(self) -> None:
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ConfigurationError("median_window must be odd and >= 1")
        if not 0.0 < self.peak_ratio <= 1.0 or not 0.0 < self.extent_ratio <= 1.0:
            raise ConfigurationError("peak/extent ratios must be in (0, 1]")
        if self.phi < 0:
            raise ConfigurationError("phi must be >= 0")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def validate(self) -> "ExperimentConfig":
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        self.inference.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _from_dict(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {sorted(unknown)}")
    return cls(**data)


_SECTIONS = {"model": ModelConfig, "loss": LossConfig,
             "train": TrainConfig, "inference": InferenceConfig}


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be an object")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(f"config: unknown sections {sorted(unknown)}")
    kwargs = {name: _from_dict(cls, data.get(name, {}), name)
              for name, cls in _SECTIONS.items()}
    return ExperimentConfig(**kwargs).validate()


def load_config(path) -> ExperimentConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def full_scale_config() -> ExperimentConfig:
    """Full-scale settings: 448 px frames, 30-frame clips at 5 fps, 256-d
    features on a 32x32 map downsampled to 8x8, 12 anchors per cell."""
    cfg = ExperimentConfig()
    cfg.model = ModelConfig(
        input_side=448, clip_len=30, channels=256, patch_stride=14,
        encoder_blocks=2, n_heads=8, spatial_layers=1, temporal_layers=3,
        window_half=2, downsample_strides=[2, 2], downsample_channels=256,
        head_width=256, head_blocks=3,
        anchor_base_sizes=[16, 32, 64, 128],
        anchor_aspect_ratios=[0.5, 1.0, 2.0])
    cfg.train = TrainConfig(iterations=60_000, batch_size=24, peak_lr=1e-4,
                            weight_decay=0.05, warmup_iters=1000, fps=5)
    return cfg.validate()
