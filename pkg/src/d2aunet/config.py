"""Training configuration and its plain-text ``key = value`` file format.

Nested dataclasses use dotted keys (``model.encoder.channels = 8,16,32,64,128``).
Tuples are comma-separated; ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentConfig
from .losses import LossConfig
from .model import EncoderSpec, ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    plateau_threshold: float = 1e-8
    batch_size: int = 4
    epochs: int = 30
    seed: int = 0
    monitor: str = "val_loss"
    augment_enabled: bool = True
    normalize: bool = True
    metrics_average: str = "micro"
    threshold: float = 0.5
    threads: int = 1
    prefetch: int = 0
    data_dir: str = ""
    manifest: str = ""
    split_fractions: tuple[float, ...] = (0.8, 0.1, 0.1)
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive")
        if self.plateau_patience < 0:
            raise ConfigError("plateau_patience must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.monitor != "val_loss":
            raise ConfigError("only monitor = val_loss is supported")
        if self.metrics_average not in ("micro", "macro"):
            raise ConfigError("metrics_average must be micro or macro")
        if self.augment.crop_to % self.model.encoder.total_stride:
            raise ConfigError(
                f"augment.crop_to ({self.augment.crop_to}) must be divisible by {self.model.encoder.total_stride}"
            )


def _parse_scalar(tp, raw: str, key: str):
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _parse_value(tp, raw: str, key: str):
    origin = typing.get_origin(tp)
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        items = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_parse_scalar(inner, p, key) for p in items)
    return _parse_scalar(tp, raw, key)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _build(cls, values: dict[str, str], prefix: str):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        key = prefix + f.name
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, values, key + ".")
        elif key in values:
            kwargs[f.name] = _parse_value(tp, values.pop(key), key)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str, cls=TrainConfig):
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = raw
    cfg = _build(cls, values, "")
    if values:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(values))}")
    return cfg


def load_config(path: str | Path, cls=TrainConfig):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, cls)


def config_items(cfg, prefix: str = "") -> list[tuple[str, str]]:
    items = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            items.extend(config_items(value, prefix + f.name + "."))
        else:
            items.append((prefix + f.name, _format_value(value)))
    return items


def format_config(cfg) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config_items(cfg))


__all__ = [
    "ConfigError",
    "TrainConfig",
    "ModelConfig",
    "EncoderSpec",
    "AugmentConfig",
    "LossConfig",
    "parse_config",
    "load_config",
    "format_config",
]
