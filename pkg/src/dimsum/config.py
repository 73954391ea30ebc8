"""Flat JSON run configuration for the CLI.

Every key is optional; unknown keys are rejected. Keys map onto
:class:`ModelConfig`, :class:`TrainConfig` and :class:`ToyDataset`, plus a few
run-level settings. ``seed`` and ``label_dropout`` feed both the model and
the trainer.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import ToyDataset
from .flow import TrainConfig
from .model import ModelConfig

DATA_KEYS = {"data_kind": "kind", "data_count": "count", "data_noise": "noise"}


@dataclass
class RunSettings:
    out_dir: str = "runs/desk"
    log_path: str = "train_log.csv"   # relative to out_dir
    ckpt_every: int = 500
    time_budget: float | None = None  # seconds


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: ToyDataset = field(default_factory=ToyDataset)
    run: RunSettings = field(default_factory=RunSettings)

    def to_dict(self) -> dict:
        flat = {}
        flat.update(dataclasses.asdict(self.model))
        flat.update(dataclasses.asdict(self.train))
        flat.update({k: getattr(self.data, v) for k, v in DATA_KEYS.items()})
        flat.update(dataclasses.asdict(self.run))
        return flat


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def known_keys() -> set[str]:
    return _fields(ModelConfig) | _fields(TrainConfig) | set(DATA_KEYS) | _fields(RunSettings)


def from_dict(raw: dict) -> RunConfig:
    unknown = sorted(set(raw) - known_keys())
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    pick = lambda cls: {k: v for k, v in raw.items() if k in _fields(cls)}
    model = ModelConfig(**pick(ModelConfig))
    train = TrainConfig(**pick(TrainConfig))
    data_kwargs = {DATA_KEYS[k]: v for k, v in raw.items() if k in DATA_KEYS}
    data = ToyDataset(channels=model.in_channels, height=model.image_size, width=model.image_size,
                      seed=train.seed, **data_kwargs)
    return RunConfig(model, train, data, RunSettings(**pick(RunSettings)))


def load_config(path) -> RunConfig:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    return from_dict(raw)


# Calibrated desk-scale toy-generation run (the acceptance run and scripts/desk.json).
DESK_RUN = {
    "num_classes": 4,
    "data_kind": "gmm",
    "data_count": 8192,
    "batch_size": 16,
    "lr": 2e-3,
    "lr_decay": "cosine",
    "warmup": 50,
    "steps": 1600,
    "time_budget": 840.0,
}
DESK_SAMPLER = {"method": "euler", "steps": 10}
