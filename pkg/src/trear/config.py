"""Flat key=value training configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .data import CropSpec
from .model import ConfigError, ModelConfig

PATH_KEYS = ("manifest", "checkpoint", "metrics", "ablation_out")
CROP_KEYS = {"crop_mode": "mode", "resize_side": "resize_side", "crop_side": "crop_side"}


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig())
    crop: CropSpec = field(default_factory=CropSpec)
    epochs: int = 50
    batch_size: int = 4
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_decay_epoch: int = 30  # 0 disables the decay
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    manifest: str = ""
    checkpoint: str = "trear.ckpt"
    metrics: str = "metrics.csv"
    ablation_runs: int = 1
    ablation_out: str = ""
    ablate_encoder: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lr_decay_epoch < 0 or (self.lr_decay_epoch and self.lr_decay_epoch >= self.epochs):
            raise ConfigError(f"lr_decay_epoch={self.lr_decay_epoch} must be below epochs={self.epochs} "
                              "or 0 to disable")
        if self.ablation_runs < 1:
            raise ConfigError("ablation_runs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for the 0-based ``epoch``: one step decay at ``lr_decay_epoch``."""
        if self.lr_decay_epoch and epoch >= self.lr_decay_epoch:
            return self.lr * self.lr_decay
        return self.lr


def _scalar_fields(obj) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(obj) if f.name not in ("model", "crop")}


def _coerce(raw: str, current, key: str):
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def config_from_dict(values: dict[str, str], base_dir: Path | None = None) -> TrainConfig:
    """Build a TrainConfig from string values; unknown keys are an error."""
    model_defaults = ModelConfig()
    crop_defaults = CropSpec()
    model_kw, crop_kw, train_kw = {}, {}, {}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"model", "crop"}
    for key, raw in values.items():
        if hasattr(model_defaults, key):
            model_kw[key] = _coerce(raw, getattr(model_defaults, key), key)
        elif key in CROP_KEYS:
            crop_kw[CROP_KEYS[key]] = _coerce(raw, getattr(crop_defaults, CROP_KEYS[key]), key)
        elif key in train_fields:
            default = next(f.default for f in dataclasses.fields(TrainConfig) if f.name == key)
            value = _coerce(raw, default, key)
            if key in PATH_KEYS and value and base_dir is not None and not Path(value).is_absolute():
                value = str(base_dir / value)
            train_kw[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        crop = CropSpec(**crop_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return TrainConfig(model=ModelConfig(**model_kw), crop=crop, **train_kw)


def load_config(path) -> TrainConfig:
    path = Path(path)
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        values[key.strip()] = value.strip()
    return config_from_dict(values, base_dir=path.parent)


def config_to_dict(cfg: TrainConfig) -> dict[str, str]:
    out = {k: v for k, v in cfg.model.to_dict().items()}
    for key, attr in CROP_KEYS.items():
        out[key] = getattr(cfg.crop, attr)
    for name in _scalar_fields(cfg):
        out[name] = getattr(cfg, name)
    return {k: (str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v))
            for k, v in out.items()}


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in config_to_dict(cfg).items())
