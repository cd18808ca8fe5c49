"""Experiment configuration stored as a flat ``key = value`` text file.

Nested settings use dotted keys (``model.depth``, ``train.loss.dice_smooth``).
Every key is always written, so an archived file fully describes a run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import FormatError
from .evaluate import EvalConfig
from .schedules import SCHEDULE_NAMES, ScheduleKind
from .segnet import ModelConfig
from .train import TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a sweep needs: data, model, training, schedules and evaluation.

    ``seed`` is the master seed.  Dataset, fold, init and batch seeds are all
    derived from it, so the ``seed`` fields inside ``model`` and ``train`` are
    overwritten at run time.
    """

    seed: int = 0
    n_train: int = 200
    n_test_lesion: int = 80
    n_test_clean: int = 20
    height: int = 64
    width: int = 64
    folds: int = 5
    schedules: tuple[str, ...] = SCHEDULE_NAMES
    workers: int = 1
    out_dir: str = "sweep"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        for name in self.schedules:
            ScheduleKind.parse(name)
        if len(set(self.schedules)) != len(self.schedules) or not self.schedules:
            raise ValueError("schedules must be a nonempty list without repeats")
        if self.n_train < self.folds or self.folds < 2:
            raise ValueError(f"need folds >= 2 and n_train >= folds (got {self.folds}, {self.n_train})")
        if self.n_test_lesion < 0 or self.n_test_clean < 0 or self.n_test_lesion + self.n_test_clean == 0:
            raise ValueError("test split needs at least one image")
        step = 2**self.model.depth
        if self.height % step or self.width % step:
            raise ValueError(f"image size {self.height}x{self.width} must be divisible by 2**depth={step}")
        if self.workers < 1:
            raise ValueError("workers must be positive")


def _flatten(obj, prefix: str = "") -> list[tuple[str, Any]]:
    out = []
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            out += _flatten(value, key + ".")
        else:
            out.append((key, value))
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(value)
    return str(value)


def _parse(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        return raw
    except ValueError as exc:
        raise FormatError(f"config key {key}: {exc}") from exc


def dumps(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in _flatten(cfg))


def _build(cls_default, values: dict[str, str], prefix: str, used: set[str]):
    updates = {}
    for f in fields(cls_default):
        key = prefix + f.name
        current = getattr(cls_default, f.name)
        if dataclasses.is_dataclass(current):
            updates[f.name] = _build(current, values, key + ".", used)
        elif key in values:
            used.add(key)
            updates[f.name] = _parse(values[key], current, key)
    return replace(cls_default, **updates)


def loads(text: str) -> ExperimentConfig:
    """Parse a config; missing keys keep their defaults, unknown keys are an error."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"config line {lineno}: expected 'key = value'")
        key = key.strip()
        if key in values:
            raise FormatError(f"config line {lineno}: duplicate key {key}")
        values[key] = value.strip()
    used: set[str] = set()
    try:
        cfg = _build(ExperimentConfig(), values, "", used)
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"invalid config: {exc}") from exc
    unknown = sorted(set(values) - used)
    if unknown:
        raise FormatError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg))

