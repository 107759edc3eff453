"""TOML run configuration: one file, per-command sections, strict keys."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .data import DataConfig
from .encoder import EncoderConfig
from .extraction import MiseConfig, SlidingWindowConfig
from .model import ModelConfig
from .training import TrainConfig

RESOLVED_NAME = "resolved_config.toml"


@dataclass
class EvalConfig:
    fscore_threshold: float = 0.01
    n_points: int = 100_000
    n_iou_samples: int = 100_000
    single_surface: bool = False
    seed: int = 0


@dataclass
class RunConfig:
    seed: Optional[int] = None
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mise: MiseConfig = field(default_factory=MiseConfig)
    sliding: SlidingWindowConfig = field(default_factory=SlidingWindowConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _drop_none(asdict(self))


SECTIONS = {"data": DataConfig, "train": TrainConfig, "mise": MiseConfig,
            "sliding": SlidingWindowConfig, "eval": EvalConfig}


class ConfigError(ValueError):
    pass


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, tuple):
        return [_drop_none(v) for v in obj]
    return obj


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}; valid: {', '.join(sorted(known))}")
    return cls(**values)


def from_dict(raw: dict) -> RunConfig:
    raw = dict(raw)
    top_known = {"seed"} | set(SECTIONS) | {"model"}
    unknown = sorted(set(raw) - top_known)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = raw.get("seed")
    cfg = RunConfig(seed=seed)
    for name, cls in SECTIONS.items():
        setattr(cfg, name, _build(cls, raw.get(name, {}), name))
    model_raw = dict(raw.get("model", {}))
    enc = _build(EncoderConfig, model_raw.pop("encoder", {}), "model.encoder")
    cfg.model = _build(ModelConfig, model_raw, "model")
    cfg.model.encoder = enc
    if seed is not None:
        for section in ("data", "train", "model", "eval"):
            if "seed" not in raw.get(section, {}):
                getattr(cfg, section).seed = int(seed)
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        raw = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from None
    return from_dict(raw)


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def write_resolved(cfg: RunConfig, directory) -> Path:
    path = Path(directory) / RESOLVED_NAME
    path.write_text(dumps(cfg))
    return path


def set_path(cfg: RunConfig, dotted: str, value: Any) -> None:
    """Apply a ``section.key=value`` override."""
    parts = dotted.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not hasattr(obj, part):
            raise ConfigError(f"unknown config section {part!r} in override {dotted!r}")
        obj = getattr(obj, part)
    key = parts[-1]
    if not hasattr(obj, key) or key.startswith("_"):
        raise ConfigError(f"unknown config key {dotted!r}")
    setattr(obj, key, value)
