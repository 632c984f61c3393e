"""Run configuration document: schema, validation, loading."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from uncprop.pipeline import TASKS
from uncprop.synth import MaskSpec
from uncprop.training import TrainConfig


class ConfigError(ValueError):
    pass


def _strict(cls, d, where: str, required=()):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(d).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    missing = [k for k in required if k not in d]
    if missing:
        raise ConfigError(f"{where}: missing required keys {missing}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class DatasetConfig:
    seed: int
    size: int = 32
    count: int = 200
    noise_std: float = 0.02

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be positive")
        if self.size < 16:
            raise ValueError("size must be at least 16")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64,)
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("hidden must list at least one positive width")
        if self.activation not in ("relu", "tanh"):
            raise ValueError("activation must be relu or tanh")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    dataset: DatasetConfig
    train_upstream: TrainConfig
    train_downstream: TrainConfig
    masks: tuple[tuple[float, float], ...] = ((2, 0.16), (4, 0.16), (8, 0.08), (16, 0.04))
    tasks: tuple[str, ...] = TASKS
    upstream: ModelConfig = field(default_factory=ModelConfig)
    downstream: ModelConfig = field(default_factory=ModelConfig)
    mc_samples: int = 256
    out: str = "runs/default"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["masks"] = [list(m) for m in self.masks]
        d["tasks"] = list(self.tasks)
        for k in ("upstream", "downstream"):
            d[k]["hidden"] = list(d[k]["hidden"])
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a mapping")
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    for key in ("seed", "dataset", "train_upstream", "train_downstream"):
        if key not in doc:
            raise ConfigError(f"missing required key {key!r} (seeds must be explicit)")
    kw = dict(doc)
    kw["dataset"] = _strict(DatasetConfig, doc["dataset"], "dataset", required=("seed",))
    for k in ("train_upstream", "train_downstream"):
        kw[k] = _strict(TrainConfig, doc[k], k, required=("seed",))
    for k in ("upstream", "downstream"):
        if k in doc:
            kw[k] = _strict(ModelConfig, doc[k], k)
    if "tasks" in doc:
        tasks = tuple(doc["tasks"])
        bad = [t for t in tasks if t not in TASKS]
        if bad or not tasks or len(set(tasks)) != len(tasks):
            raise ConfigError(f"tasks must be a non-empty subset of {TASKS}, got {list(tasks)}")
        kw["tasks"] = tasks
    if "masks" in doc:
        kw["masks"] = tuple(_mask_row(m, i) for i, m in enumerate(doc["masks"]))
        if not kw["masks"]:
            raise ConfigError("masks must not be empty")
    for k in ("seed", "mc_samples"):
        if k in kw and (not isinstance(kw[k], int) or isinstance(kw[k], bool)):
            raise ConfigError(f"{k} must be an integer")
    if kw.get("mc_samples", 2) < 2:
        raise ConfigError("mc_samples must be at least 2")
    cfg = RunConfig(**kw)
    validate_masks(cfg)
    return cfg


def _mask_row(m, i):
    try:
        accel, c = m
        return float(accel) if float(accel) != int(accel) else int(accel), float(c)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"masks[{i}] must be an [acceleration, center_fraction] pair") from exc


def validate_masks(cfg: RunConfig) -> None:
    for i, (accel, c) in enumerate(cfg.masks):
        try:
            MaskSpec(accel, c, cfg.dataset.size)
        except ValueError as exc:
            raise ConfigError(f"masks[{i}] = ({accel}, {c}): {exc}") from exc


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} not found")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    return parse_config(doc)
