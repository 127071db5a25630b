"""Declarative run configuration: one JSON file drives the whole pipeline.

Sections map one-to-one onto the library's config dataclasses. Parsing is
strict (unknown keys are rejected), every field has a default, and the fully
resolved config is written next to each run's outputs so a run can be
reproduced from its artifacts alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .losses import LossWeights
from .model import DPNetConfig
from .training import TrainingSchedule


@dataclass(frozen=True)
class ModelSection:
    stages: int = 2
    residual_blocks: int = 5
    feature_channels: int = 64
    head_kernel: int = 9
    trunk_kernel: int = 3
    tail_kernel: int = 9
    image_channels: int = 1

    def dpnet_config(self) -> DPNetConfig:
        return DPNetConfig(
            residual_blocks=self.residual_blocks,
            feature_channels=self.feature_channels,
            head_kernel=self.head_kernel,
            trunk_kernel=self.trunk_kernel,
            tail_kernel=self.tail_kernel,
            image_channels=self.image_channels,
        )

    def validate(self) -> None:
        if self.stages < 1:
            raise ValueError(f"model.stages must be >= 1, got {self.stages}")
        self.dpnet_config().validate()


@dataclass(frozen=True)
class LossSection:
    lambda_pixel: float = 1.0
    lambda_perceptual: float = 0.006
    lambda_edge: float = 1.0
    feature_extractor: str = "tiny"     # identity | tiny | vgg19
    edge_network: str = "sobel"         # sobel | hed
    vgg19_weights: Optional[str] = None
    hed_weights: Optional[str] = None
    edge_threshold: float = 0.5

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_pixel, self.lambda_perceptual, self.lambda_edge)

    def validate(self) -> None:
        self.loss_weights().validate()
        if self.feature_extractor not in ("identity", "tiny", "vgg19"):
            raise ValueError(f"unknown loss.feature_extractor {self.feature_extractor!r}")
        if self.edge_network not in ("sobel", "hed"):
            raise ValueError(f"unknown loss.edge_network {self.edge_network!r}")
        if not 0.0 <= self.edge_threshold <= 1.0:
            raise ValueError(f"loss.edge_threshold must be in [0,1], got {self.edge_threshold}")


@dataclass(frozen=True)
class SyntheticSection:
    count: int = 200
    canvas: int = 128
    seed: int = 0

    def validate(self) -> None:
        if self.count < 10:
            raise ValueError(f"data.synthetic.count must be >= 10, got {self.count}")
        if self.canvas < 16 or self.canvas % 4 != 0:
            raise ValueError(
                f"data.synthetic.canvas must be >= 16 and divisible by 4, got {self.canvas}"
            )


@dataclass(frozen=True)
class DataSection:
    manifest: Optional[str] = None
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1

    def fractions(self) -> tuple:
        return (self.train_fraction, self.val_fraction, self.test_fraction)

    def validate(self) -> None:
        if abs(sum(self.fractions()) - 1.0) > 1e-9:
            raise ValueError(f"data split fractions must sum to 1, got {self.fractions()}")
        self.synthetic.validate()


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    training: TrainingSchedule = field(default_factory=TrainingSchedule)
    data: DataSection = field(default_factory=DataSection)
    output_dir: str = "runs/run"
    device: str = "cpu"
    threads: int = 1

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.training.validate()
        self.data.validate()
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")
        if not self.output_dir:
            raise ValueError("output_dir must be nonempty")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = _build_dataclass(cls, raw, path="")
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValueError(f"config {path} must contain a JSON object")
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _build_dataclass(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ValueError(f"config section {path or '<root>'} must be an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        where = path or "top level"
        raise ValueError(f"unknown config key(s) at {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        target = _SECTION_TYPES.get((cls, name))
        if target is not None:
            kwargs[name] = _build_dataclass(target, value, f"{path}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValueError(f"invalid config section {path or '<root>'}: {exc}") from exc


_SECTION_TYPES = {
    (RunConfig, "model"): ModelSection,
    (RunConfig, "loss"): LossSection,
    (RunConfig, "training"): TrainingSchedule,
    (RunConfig, "data"): DataSection,
    (DataSection, "synthetic"): SyntheticSection,
}


def desk_scale_config(output_dir: str = "runs/desk", seed: int = 1234) -> RunConfig:
    """The bundled self-contained configuration: a 200-patch synthetic corpus
    and a compact 2-stage cascade trained on a reduced schedule (15 parallel
    + 3 fine-tune epochs), sized to finish on a desktop CPU."""
    return RunConfig(
        model=ModelSection(stages=2, residual_blocks=3, feature_channels=32),
        loss=LossSection(
            lambda_pixel=1.0,
            lambda_perceptual=0.05,
            lambda_edge=2e-6,
            feature_extractor="tiny",
            edge_network="sobel",
        ),
        training=TrainingSchedule(
            initial_lr=1e-3,
            decay_every=6,
            epochs_parallel=15,
            epochs_finetune=3,
            batch_size=2,
            seed=seed,
        ),
        data=DataSection(synthetic=SyntheticSection(count=200, canvas=128, seed=seed)),
        output_dir=output_dir,
    )
