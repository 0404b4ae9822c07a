"""Run configuration: one JSON file with per-command sections, every field defaulted."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from sfuda3d.adapt import AdaptConfig, TrainConfig
from sfuda3d.exceptions import ConfigError, ParameterError

DEFAULT_EVAL_STRIDES = ((16, 16, 16), (8, 8, 8), (4, 4, 4), (2, 2, 2))


@dataclass
class DataConfig:
    n_train: int = 10
    n_test: int = 4
    shape: tuple[int, int, int] = (64, 64, 64)


@dataclass
class PathsConfig:
    data_dir: str = "data"
    checkpoint: str = "runs/source.ckpt"
    library: str = "runs/library.sgmm"
    adapted: str = "runs/adapted.ckpt"
    report_dir: str = "runs/report"


@dataclass
class ModelConfig:
    num_classes: int = 5
    widths: tuple[int, ...] = (8, 16, 32)
    dilations: tuple[int, ...] = (1, 2, 4)


@dataclass
class RunConfig:
    seed: int = 42
    source_modality: str = "A"
    target_modality: str = "B"
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    eval_strides: tuple[tuple[int, int, int], ...] = DEFAULT_EVAL_STRIDES
    eval_patch: int = 32

    def to_dict(self) -> dict:
        out = _plain(dataclasses.asdict(self))
        for section in _SEEDED:
            out[section].pop("seed")
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


_SECTIONS = {"paths": PathsConfig, "data": DataConfig, "model": ModelConfig, "train": TrainConfig, "adapt": AdaptConfig}
# these sections take their seed from the global one
_SEEDED = ("train", "adapt")


def _coerce(cls, name: str, value):
    default = next(f for f in dataclasses.fields(cls) if f.name == name)
    current = default.default if default.default is not dataclasses.MISSING else default.default_factory()
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{cls.__name__}.{name} expects a list")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if isinstance(current, bool) or not isinstance(current, (int, float, str)):
        return value
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    if not isinstance(value, type(current)) or isinstance(value, bool):
        raise ConfigError(f"{cls.__name__}.{name} expects {type(current).__name__}, got {value!r}")
    return value


def _build(cls, payload: dict, where: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"section {where!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    if cls in (TrainConfig, AdaptConfig):
        known.discard("seed")
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in payload.items():
        if cls is RunConfig and name in _SECTIONS:
            kwargs[name] = _build(_SECTIONS[name], value, name)
        else:
            kwargs[name] = _coerce(cls, name, value)
    try:
        return cls(**kwargs)
    except ParameterError as exc:
        raise ConfigError(f"invalid {where!r} section: {exc}") from exc


def from_dict(payload: dict) -> RunConfig:
    return _build(RunConfig, payload, "root")


def loads(text: str) -> RunConfig:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(payload)


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def apply_override(payload: dict, assignment: str) -> None:
    """Apply ``section.key=value`` in place; the value is parsed as JSON, falling back to a string."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = payload
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override inside non-section {key!r}")
    node[parts[-1]] = value
