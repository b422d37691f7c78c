"""Run configuration: one validated record of every tunable in the pipeline."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .errors import ConfigError, UserError
from .loss import PALParams
from .preprocess import MODES
from .synthgen import DatasetConfig, PillClass


@dataclass
class RunConfig:
    seed: int = 0
    classes: list = field(default_factory=list)
    # data
    scene_size: int = 256
    poses: int = 10
    train_poses: int = 6
    templates: int = 4
    shadow_sigma: float = 3.0
    max_pills: int = 10
    background: str = "blurred"
    crop_side: int = 64
    # encoder and training
    dim: int = 32
    hidden: int = 64
    epochs: int = 20
    lr: float = 1e-2
    batch_size: int = 32
    proxy_lr_scale: float = 1.0
    # loss
    alpha: float = 32.0
    delta: float = 0.1
    pieces: int = 1
    weighted: bool = False
    normalize_reduced: bool = True
    # proxy operations
    decompose: bool = True
    proxy_steps: int = 2000
    proxy_lr: float = 0.2
    proxy_restarts: int = 4
    # classification and verification
    classifier: str = "sl"
    knn_k: int = 1
    threshold_min: float = 0.87
    threshold_gap: float = 0.1
    window: int = 10
    grouping: str = "multiple"

    def validate(self) -> "RunConfig":
        positive = (
            "scene_size", "poses", "templates", "max_pills", "crop_side", "dim", "hidden",
            "epochs", "batch_size", "pieces", "proxy_steps", "proxy_restarts", "knn_k", "window",
        )
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"config field {name!r} must be a positive integer, got {value!r}")
        for name in ("lr", "proxy_lr", "proxy_lr_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"config field {name!r} must be >= 0")
        if self.alpha <= 0 or self.shadow_sigma <= 0:
            raise ConfigError("alpha and shadow_sigma must be > 0")
        if not 0 < self.train_poses < self.poses:
            raise ConfigError("train_poses must be at least 1 and leave a test pose")
        if self.dim % self.pieces:
            raise ConfigError(f"dim {self.dim} is not divisible by pieces {self.pieces}")
        if self.background not in MODES:
            raise ConfigError(f"background must be one of {MODES}")
        if self.classifier not in ("sl", "knn"):
            raise ConfigError("classifier must be 'sl' or 'knn'")
        if self.grouping not in ("single", "multiple"):
            raise ConfigError("grouping must be 'single' or 'multiple'")
        self.pill_classes()
        return self

    def pill_classes(self) -> list[PillClass]:
        try:
            classes = [PillClass.from_dict(c) for c in self.classes]
        except (KeyError, TypeError, ValueError, UserError) as exc:
            raise ConfigError(f"malformed class entry: {exc}") from exc
        if len({c.label for c in classes}) != len(classes):
            raise ConfigError("class labels must be unique")
        return classes

    def dataset_config(self) -> DatasetConfig:
        return DatasetConfig(
            classes=self.pill_classes(),
            seed=self.seed,
            scene_size=self.scene_size,
            poses=self.poses,
            templates=self.templates,
            shadow_sigma=self.shadow_sigma,
            max_pills=self.max_pills,
            train_poses=self.train_poses,
        )

    def pal_params(self) -> PALParams:
        return PALParams(self.alpha, self.delta, self.pieces, self.weighted, self.normalize_reduced)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        return from_dict({**self.to_dict(), **{k: v for k, v in overrides.items() if v is not None}})


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def from_dict(d: dict) -> RunConfig:
    unknown = set(d) - set(FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    try:
        return RunConfig(**d).validate()
    except TypeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc


def load_config(path=None) -> RunConfig:
    """Read a JSON config file; with no path, the bundled demo configuration."""
    try:
        if path is None:
            text = resources.files("proxyid").joinpath("configs/demo.json").read_text()
        else:
            text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return from_dict(data)
