"""Run configuration: one JSON document holding every stage's settings.

Each section maps onto a dataclass; unknown sections or keys are rejected so
that a typo never silently falls back to a default.  The top-level ``seed``
drives scene generation and both training stages.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import evaluation, net, pseudolabel, synthgen
from .seeds import SeedThresholds
from .training import TrainConfig


class ConfigError(ValueError):
    """Validation failure; ``key`` names the offending dotted key."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RefineConfig:
    strategy: str = "majority"
    k: int = 3


@dataclass(frozen=True)
class CorpusConfig:
    num_samples: int = 200
    test_samples: int = 100


@dataclass(frozen=True)
class EvalConfig:
    n_thresholds: int = 99
    svg: bool = False


def _student_default():
    return TrainConfig(steps=2000)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    deterministic: bool = False
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    scene: synthgen.SceneConfig = field(default_factory=synthgen.SceneConfig)
    cam: synthgen.CamDegradation = field(default_factory=synthgen.CamDegradation)
    seeds: SeedThresholds = field(default_factory=SeedThresholds)
    refine: RefineConfig = field(default_factory=RefineConfig)
    net: net.NetConfig = field(default_factory=net.NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    student: TrainConfig = field(default_factory=_student_default)
    msf: pseudolabel.MsfConfig = field(default_factory=pseudolabel.MsfConfig)
    nms: pseudolabel.NmsConfig = field(default_factory=pseudolabel.NmsConfig)
    match: evaluation.MatchConfig = field(default_factory=evaluation.MatchConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def scene_config(self):
        return dataclasses.replace(self.scene, seed=self.seed)

    def train_config(self):
        return dataclasses.replace(self.train, seed=self.seed)

    def student_config(self):
        return dataclasses.replace(self.student, seed=self.seed)

    def net_config(self):
        return dataclasses.replace(self.net, num_classes=self.scene.num_classes,
                                   in_size=self.scene.image_size)


# sections whose seed is owned by the top-level key
_SEEDED = {"scene", "train", "student"}


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(prefix, "expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if key not in fields or (prefix in _SEEDED and key == "seed"):
            raise ConfigError(dotted, "unknown key")
        sub = _section_type(cls, key)
        if sub is not None:
            kwargs[key] = _build(sub, value, dotted)
        else:
            kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix or "config", str(exc)) from exc


def _section_type(cls, key):
    if cls is not RunConfig:
        return None
    default = getattr(RunConfig(), key)
    return type(default) if dataclasses.is_dataclass(default) else None


def from_dict(data) -> RunConfig:
    return _build(RunConfig, data, "")


def load(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from exc
    return from_dict(data)


def to_dict(cfg: RunConfig):
    def clean(v):
        if isinstance(v, tuple):
            return [clean(x) for x in v]
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        return v

    out = clean(dataclasses.asdict(cfg))
    for section in _SEEDED:
        out[section].pop("seed", None)
    return out


def dump(cfg: RunConfig, path):
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")
