"""Run configuration and its flat key/value file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

VARIANTS = ("tgqn", "gqn", "seqgqn")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    d: int = 256
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    cores: int = 4
    latent: int = 3
    core_channels: int = 64
    canvas_channels: int = 64
    tower_channels: int = 64
    kernel: int = 3
    max_views: int = 8
    # one set of decoder cores reused by every rendering step; False is not implemented
    share_decoder_across_steps: bool = True

    @property
    def grid(self) -> int:
        return self.image_size // 4

    def validate(self):
        if self.image_size % 4 or self.image_size < 4:
            raise ConfigError(f"image_size must be a positive multiple of 4, got {self.image_size}")
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.cores < 1:
            raise ConfigError("cores (M) must be >= 1")
        if self.layers < 1:
            raise ConfigError("layers (L) must be >= 1")
        if not self.share_decoder_across_steps:
            raise ConfigError("per-step decoder parameters are not implemented")


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a training / evaluation run.

    ``gqn`` ignores ``masked``, ``layers`` and ``heads``.
    """

    variant: str = "tgqn"
    masked: bool = True
    n_views: int = 3
    cores: int = 4
    d: int = 256
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    latent: int = 3
    core_channels: int = 64
    canvas_channels: int = 64
    tower_channels: int = 64
    kernel: int = 3
    image_size: int = 32
    max_views: int = 8
    beta: float = 250.0
    sigma_start: float = 2.0
    sigma_end: float = 0.7
    sigma_anneal_frac: float = 0.8
    lr_start: float = 5e-4
    lr_end: float = 5e-5
    batch_size: int = 16
    max_steps: int = 20000
    seed: int = 0
    train_path: str = ""
    eval_path: str = ""
    holdout_frac: float = 0.1
    train_ordered: bool = True
    eval_ordered: bool = False
    eval_every: int = 0
    eval_scenes: int = 50
    eval_repeats: int = 5
    log_every: int = 50
    checkpoint_every: int = 0
    max_train_scenes: int = 0

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 1 <= self.n_views <= self.max_views:
            raise ConfigError(f"n_views must be in [1, {self.max_views}]")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.sigma_end <= 0 or self.sigma_start <= 0:
            raise ConfigError("sigma bounds must be positive")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1 and max_steps >= 0")
        self.model_config().validate()
        return self

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        default = cls()
        out = {}
        for key, value in data.items():
            out[key] = _coerce(key, value, type(getattr(default, key)))
        return cls(**out).validate()


def _coerce(key, value, typ):
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if typ is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}") from None


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a flat key/value mapping")
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def diff_configs(a: dict, b: dict) -> list[str]:
    """Field-level differences as ``key: a != b`` lines."""
    keys = sorted(set(a) | set(b))
    return [f"{k}: {a.get(k)!r} != {b.get(k)!r}" for k in keys if a.get(k) != b.get(k)]
