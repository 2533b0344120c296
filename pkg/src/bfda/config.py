"""Experiment configuration: one JSON document fully determines a run."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Optional

from .adaptation.trainer import AdaptConfig, ProbeConfig
from .data import TrainConfig
from .detector import DetectorConfig
from .synth_data import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    has_occlusion: bool = True
    batch_size: int = 16


@dataclass
class RunConfig:
    name: str = ""
    seed: int = 0
    device: str = "cpu"


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Copy with ``seed`` propagated to every seeded component."""
        d = self.to_dict()
        d["run"]["seed"] = d["synth"]["seed"] = d["train"]["seed"] = seed
        d["adapt"]["seed"] = d["probe"]["seed"] = seed
        return ExperimentConfig.from_dict(d)

    def to_dict(self) -> dict:
        return _plain(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        try:
            return _build(cls, doc, "")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: Optional[str]) -> "ExperimentConfig":
        if path is None:
            return cls()
        try:
            with open(path) as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)


def _plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, doc: dict, where: str):
    """Recursively instantiate dataclass ``cls`` from ``doc``, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys at '{where or '.'}': {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        default = getattr(cls(), name) if _has_default(fields[name]) else None
        if dataclasses.is_dataclass(default) and isinstance(value, dict):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def _has_default(f: dataclasses.Field) -> bool:
    return f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING
