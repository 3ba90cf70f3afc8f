"""Run configuration: one flat JSON object, every key optional."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields

from peter.model import PeterConfig
from peter.training import TrainSchedule


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    dataset: str | None = None
    synth: bool = False
    synth_users: int = 50
    synth_items: int = 50
    synth_features: int = 20
    synth_records_per_user: int = 50
    rating_lo: float = 1.0
    rating_hi: float = 5.0
    seed: int = 0
    vocab_cap: int = 20000
    # model
    d: int = 512
    ffn_dim: int = 2048
    n_layers: int = 2
    n_heads: int = 2
    word_budget: int = 15
    max_feature_words: int = 1
    mask_mode: str = "peter"
    use_features: bool = False
    scale_full_d: bool = False
    lambda_e: float = 1.0
    lambda_c: float = 1.0
    lambda_r: float = 0.1
    # schedule
    lr: float = 1.0
    clip: float = 1.0
    batch_size: int = 128
    decay: float = 0.25
    max_decays: int = 5
    max_epochs: int = 100
    monitor: str = "J"
    # reporting
    context_top_k: int = 15
    div_pair_budget: int = 1_000_000
    out: str = "runs/default"

    def __post_init__(self):
        if self.rating_lo >= self.rating_hi:
            raise ConfigError(f"rating_lo ({self.rating_lo}) must be below rating_hi ({self.rating_hi})")
        if self.monitor not in ("J", "L_e"):
            raise ConfigError(f"monitor must be 'J' or 'L_e', got {self.monitor!r}")
        for name in ("vocab_cap", "batch_size", "max_epochs", "context_top_k", "div_pair_budget"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        try:
            self.model()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    @property
    def rating_bounds(self) -> tuple[float, float]:
        return (self.rating_lo, self.rating_hi)

    def model(self) -> PeterConfig:
        keys = {f.name for f in fields(PeterConfig)}
        return PeterConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in keys})

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(
            lr=self.lr,
            clip=self.clip,
            batch_size=self.batch_size,
            decay=self.decay,
            max_decays=self.max_decays,
            max_epochs=self.max_epochs,
            monitor=self.monitor,
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        defaults = {f.name: f.default for f in fields(cls)}
        for k, v in d.items():
            want = type(defaults[k])
            if k == "dataset":
                ok = v is None or isinstance(v, str)
            elif want is float:
                ok = isinstance(v, (int, float)) and not isinstance(v, bool)
            elif want is int:
                ok = isinstance(v, int) and not isinstance(v, bool)
            else:
                ok = isinstance(v, want)
            if not ok:
                raise ConfigError(f"config key {k!r} expects {want.__name__}, got {v!r}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        return cls.from_dict(d)


def defaults_table() -> list[tuple[str, object]]:
    return [(f.name, f.default) for f in fields(RunConfig)]
