"""Experiment configuration files.

A config is a YAML mapping with four sections::

    model:   # block stack and memory hyperparameters (n and k required)
      num_layers: 2
      block: ffn            # ffn | smoe
      msn_layer_count: 2
      n: 4096
      k: 8
      ...
    data:    # synthetic generator, see DataConfig
      n_queries: 10000
      seed: 0
    train:   # optimizer and schedule, see TrainConfig
      lr: 0.003
      optimizer: adam
    output:
      dir: runs/desk

Unknown keys anywhere are rejected, as are values of the wrong type.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .harness.data import DataConfig
from .harness.model import ModelConfig
from .harness.train import TrainConfig
from .numerics import ContractError

REQUIRED = {"model": ("n", "k")}


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        self.field = field_path
        super().__init__(f"{field_path}: {message}")


@dataclass
class OutputConfig:
    dir: str = "runs/default"
    metrics: str = "metrics.jsonl"
    checkpoint: str = "model.ckpt"
    histogram: str = "histogram.csv"

    def path(self, name: str) -> Path:
        return Path(self.dir) / getattr(self, name)


def _model_fields():
    return {f.name: f for f in dataclasses.fields(ModelConfig) if f.name != "d_in"}


SECTIONS = {
    "model": _model_fields,
    "data": lambda: {f.name: f for f in dataclasses.fields(DataConfig)},
    "train": lambda: {f.name: f for f in dataclasses.fields(TrainConfig)},
    "output": lambda: {f.name: f for f in dataclasses.fields(OutputConfig)},
}


def _default_of(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return dataclasses.MISSING


def _check_type(path, value, default):
    if default is dataclasses.MISSING or default is None:
        if value is not None and not isinstance(value, (int, float, str, bool)):
            raise ConfigError(path, f"expected a scalar, got {type(value).__name__}")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
    return value


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    @classmethod
    def from_dict(cls, raw) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config must be a mapping")
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown section")
        parsed = {}
        for section, get_fields in SECTIONS.items():
            body = raw.get(section) or {}
            if not isinstance(body, dict):
                raise ConfigError(section, "section must be a mapping")
            known = get_fields()
            for key in body:
                if key not in known:
                    raise ConfigError(f"{section}.{key}", "unknown key")
            for key in REQUIRED.get(section, ()):
                if key not in body:
                    raise ConfigError(f"{section}.{key}", "required field is missing")
            parsed[section] = {
                key: _check_type(f"{section}.{key}", value, _default_of(known[key]))
                for key, value in body.items()
            }
        try:
            data = DataConfig(**parsed["data"])
            train = TrainConfig(**parsed["train"])
            output = OutputConfig(**parsed["output"])
            cfg = cls(parsed["model"], data, train, output)
            cfg.model_config()  # validate against module contracts
        except ContractError as exc:
            raise ConfigError("<contract>", str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"invalid YAML: {exc}") from exc
        return cls.from_dict(raw or {})

    def to_dict(self) -> dict:
        return {
            "model": dict(self.model),
            "data": dataclasses.asdict(self.data),
            "train": dataclasses.asdict(self.train),
            "output": dataclasses.asdict(self.output),
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def model_config(self, **overrides) -> ModelConfig:
        return ModelConfig(d_in=self.data.d_in, **{**self.model, **overrides})

    def replace(self, section: str, **changes) -> "ExperimentConfig":
        raw = self.to_dict()
        raw[section] = {**raw[section], **changes}
        return ExperimentConfig.from_dict(raw)


DESK_TRAIN = {"optimizer": "adam", "lr": 0.002, "warmup_steps": 300, "epochs": 6, "batch_size": 256}


def desk_config(seed: int = 0, **model) -> ExperimentConfig:
    """The desk experiment: n = 64^2, k = 8, two MSN-FFN layers, 100k samples.

    ``seed`` drives data, init and batch order together. Keyword arguments
    override model fields.
    """
    return ExperimentConfig.from_dict({
        "model": {"num_layers": 2, "msn_layer_count": 2, "n": 64 * 64, "k": 8, "seed": seed, **model},
        "data": {"seed": seed},
        "train": {**DESK_TRAIN, "seed": seed},
        "output": {"dir": f"runs/desk-seed{seed}"},
    })
