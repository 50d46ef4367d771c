"""Experiment configuration: presets, JSON files, flag overrides, validation."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .federation import StrategySpec, TrainConfig
from .models import PRESETS, ModelConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synth_image"
    path: str | None = None
    num_classes: int = 10
    per_class: int = 50
    extent: int = 16
    channels: int = 3
    noise: float = 0.25
    vocab: int = 16
    seq_len: int = 32
    num_styles: int = 4
    per_style: int = 100
    seed: int = 0


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str = "pathological"
    num_clients: int = 10
    classes_per_client: int = 2
    alpha: float = 0.3
    beta: float = 10.0
    sigma_max: float = 0.0
    sigma_unit: float = 1.0
    novel_clients: int = 0
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    strategy: StrategySpec = field(default_factory=StrategySpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    preset: str = "desk"
    out: str | None = None
    checkpoint_every: int = 0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        train = d.pop("train")
        d.update(train)
        return d


TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
SECTIONS = {"dataset": DatasetSpec, "partition": PartitionSpec, "model": ModelConfig, "strategy": StrategySpec}
TOP_KEYS = {"preset", "out", "checkpoint_every"}

PRESET_OVERRIDES = {
    "desk": {},
    "paper": {
        "rounds": 1500,
        "sample_rate": 0.1,
        "partition": {"num_clients": 50},
        "dataset": {"kind": "cifar10"},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _check_keys(doc: dict) -> None:
    for k, v in doc.items():
        if k in SECTIONS:
            if not isinstance(v, dict):
                raise ConfigError(f"{k}: expected an object")
            allowed = {f.name for f in dataclasses.fields(SECTIONS[k])}
            unknown = sorted(set(v) - allowed)
            if unknown:
                raise ConfigError(f"unknown key(s) in {k}: {', '.join(unknown)}")
        elif k not in TRAIN_KEYS and k not in TOP_KEYS:
            raise ConfigError(f"unknown key: {k}")


def _build(doc: dict) -> ExperimentConfig:
    preset = doc.get("preset", "desk")
    if preset not in PRESETS:
        raise ConfigError(f"preset: unknown preset {preset!r}")
    doc = _merge(PRESET_OVERRIDES[preset], doc)
    try:
        model = dataclasses.replace(PRESETS[preset], **doc.get("model", {}))
        sections = {
            "dataset": DatasetSpec(**doc.get("dataset", {})),
            "partition": PartitionSpec(**doc.get("partition", {})),
            "model": model,
            "strategy": StrategySpec(**doc.get("strategy", {})),
            "train": TrainConfig(**{k: v for k, v in doc.items() if k in TRAIN_KEYS}),
        }
    except TypeError as err:
        raise ConfigError(str(err)) from err
    cfg = ExperimentConfig(
        **sections,
        preset=preset,
        out=doc.get("out"),
        checkpoint_every=int(doc.get("checkpoint_every", 0)),
    )
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    t = cfg.train
    checks = [
        ("rounds", t.rounds >= 1, "must be >= 1"),
        ("local_epochs", t.local_epochs >= 1, "must be >= 1"),
        ("lr", t.lr > 0, "must be > 0"),
        ("server_lr", t.server_lr > 0, "must be > 0"),
        ("batch_size", t.batch_size >= 1, "must be >= 1"),
        ("sample_rate", 0 < t.sample_rate <= 1, "must lie in (0, 1]"),
        ("workers", t.workers >= 1, "must be >= 1"),
        ("eval_every", t.eval_every >= 1, "must be >= 1"),
        ("checkpoint_every", cfg.checkpoint_every >= 0, "must be >= 0"),
        ("partition.num_clients", cfg.partition.num_clients >= 1, "must be >= 1"),
        ("partition.novel_clients",
         0 <= cfg.partition.novel_clients < cfg.partition.num_clients, "must lie in [0, num_clients)"),
        ("strategy.mu", cfg.strategy.mu >= 0, "must be >= 0"),
    ]
    for name, ok, msg in checks:
        if not ok:
            raise ConfigError(f"{name} {msg}")
    if cfg.dataset.kind not in ("synth_image", "synth_char", "cifar10", "cifar100"):
        raise ConfigError(f"dataset.kind: unknown dataset {cfg.dataset.kind!r}")
    if cfg.partition.scheme not in ("pathological", "dirichlet", "pachinko"):
        raise ConfigError(f"partition.scheme: unknown scheme {cfg.partition.scheme!r}")
    try:
        cfg.model.validate()
        cfg.strategy.validate()
    except ValueError as err:
        raise ConfigError(str(err)) from err


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Resolve a config from an optional JSON file plus flag overrides.

    ``overrides`` uses the same nested layout as the file and wins over it.
    """
    doc = {}
    if path is not None:
        text = Path(path).read_text()
        doc = json.loads(text) if text.strip() else {}
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
    _check_keys(doc)
    if overrides:
        _check_keys(overrides)
        doc = _merge(doc, overrides)
    return _build(doc)


def from_dict(doc: dict) -> ExperimentConfig:
    """Rebuild a config from its :meth:`ExperimentConfig.to_dict` echo."""
    doc = {k: v for k, v in doc.items() if k != "dataset_fingerprint"}
    _check_keys(doc)
    return _build(doc)
