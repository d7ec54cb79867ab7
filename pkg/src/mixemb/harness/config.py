"""Experiment configuration: nested dataclasses loaded from one JSON document."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import ConfigError
from ..synthgen import DatasetConfig


@dataclass
class ModelConfig:
    channels: int = 64
    depth: int = 4
    kernel: int = 3
    att_dim: int = 32
    emb_dim: int = 32
    freeze_depth: int = 2
    student_copy_projection: bool = True
    extractor_channels: int = 128
    extractor_kernel: int = 3


@dataclass
class TrainConfig:
    teacher_steps: int = 600
    teacher_batch: int = 32
    teacher_lr: float = 2e-3
    teacher_crop_min: float = 0.5
    teacher_remix: bool = True
    arcface_scale: float = 30.0
    arcface_margin: float = 0.5
    student_steps: int = 1000
    student_batch: int = 16
    student_lr: float = 1e-3
    student_speed_range: list = field(default_factory=lambda: [0.8, 1.25])
    student_speed_prob: float = 0.5
    tse_steps: int = 2000
    tse_batch: int = 8
    tse_lr: float = 1e-3
    tse_crop_seconds: float = 1.5
    tse_speed_range: list = field(default_factory=lambda: [0.8, 1.25])
    tse_speed_prob: float = 0.75
    grad_clip: float = 5.0
    log_every: int = 50


@dataclass
class EvalConfig:
    alphas: list = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(11)])
    max_lag: int = 80
    margin_edges: list = field(default_factory=lambda: [0.05, 0.2])
    kmeans_restarts: int = 10


@dataclass
class ExperimentConfig:
    seed: int = 0
    threads: int = 1
    out: str = "runs/default"
    data: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in values.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            if isinstance(default, bool) or default is None:
                ok = isinstance(value, type(default)) if default is not None else True
            elif isinstance(default, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            elif isinstance(default, float):
                ok = isinstance(value, (int, float)) and not isinstance(value, bool)
                value = float(value)
            else:
                ok = isinstance(value, type(default))
            if not ok:
                raise ConfigError(f"{where}.{name}: expected {type(default).__name__}, got {value!r}")
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(values: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, values, "config")
    validate(cfg)
    return cfg


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides`` (dotted keys)."""
    values = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    for key, value in (overrides or {}).items():
        node = values
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return config_from_dict(values)


def validate(cfg: ExperimentConfig):
    d = cfg.data
    if not 1 <= d.n_sp <= 3:
        raise ConfigError(f"data.n_sp={d.n_sp} must be 1..3")
    if d.split not in ("disjoint", "shared"):
        raise ConfigError(f"data.split must be 'disjoint' or 'shared', got {d.split!r}")
    if d.n_speakers < d.n_sp or (d.split == "disjoint" and d.n_test_speakers < d.n_sp):
        raise ConfigError("speaker pools must hold at least n_sp speakers")
    if not d.utterance_seconds >= d.crop_seconds:
        raise ConfigError("data.utterance_seconds must be >= data.crop_seconds")
    if not 0 <= cfg.model.freeze_depth <= cfg.model.depth:
        raise ConfigError("model.freeze_depth must lie in [0, model.depth]")
    t = cfg.train
    for name in ("student_speed_range", "tse_speed_range"):
        r = getattr(t, name)
        if r and not (len(r) == 2 and 0 < r[0] <= r[1]):
            raise ConfigError(f"train.{name} must be [] or [low, high] with 0 < low <= high, got {r}")
    for name in ("student_speed_prob", "tse_speed_prob"):
        if not 0.0 <= getattr(t, name) <= 1.0:
            raise ConfigError(f"train.{name} must lie in [0, 1]")
    if t.tse_crop_seconds < 0:
        raise ConfigError("train.tse_crop_seconds must be >= 0 (0 trains on whole mixtures)")
    for a in cfg.eval.alphas:
        if not 0.0 <= a <= 1.0:
            raise ConfigError(f"eval.alphas entry {a} outside [0, 1]")
