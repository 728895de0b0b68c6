"""Run configuration: nested dataclasses loaded from YAML and validated.

Every section has desk-scale defaults; ``FULL_SCALE_PRESET`` lists the values of
the original full-scale schedules for reference.  The dataset root may be
overridden with the ``AVINPAINT_DATA_ROOT`` environment variable.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

DATA_ROOT_ENV = "AVINPAINT_DATA_ROOT"


@dataclass
class DataConfig:
    root: str = "data"
    n_classes: int = 4
    clips_per_class: int = 50
    frame_size: int = 112
    splits: tuple = (0.7, 0.1, 0.2)


@dataclass
class AVNetSection:
    c: int = 64
    n_clusters: int = 10
    tau: float = 0.07
    scale_init: float = 10.0
    bias_init: float = -5.0
    lr: float = 1e-4
    epochs: int = 14
    warmup_epochs: int = 1
    decay_epochs: int = 10
    batch_size: int = 32
    frames_per_clip: int = 6
    visual_widths: tuple = (32, 64, 64)
    audio_widths: tuple = (32, 64, 64)


@dataclass
class WeightsSection:
    l1: float = 1.0
    adv: float = 0.01
    att_av: float = 2.0
    cls_av: float = 1.0


@dataclass
class VINetSection:
    steps: int = 2000
    batch_size: int = 4
    window: int = 8
    lr: float = 1e-4
    decay_at: float = 0.6
    d_lr: float = 1e-4
    weights: WeightsSection = field(default_factory=WeightsSection)
    mask: str = "smask"
    smask_source: str = "avnet"
    widths: tuple = (64, 128, 256)
    d_widths: tuple = (32, 64, 64)
    warm_start: typing.Optional[str] = None


@dataclass
class MetricsSection:
    extractor: str = "avnet"
    projection_dim: int = 64
    mask_seed: int = 1000


@dataclass
class RunConfig:
    seed: int
    data: DataConfig = field(default_factory=DataConfig)
    avnet: AVNetSection = field(default_factory=AVNetSection)
    vinet: VINetSection = field(default_factory=VINetSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def to_dict(self) -> dict:
        return _plain(asdict(self))


# Full-scale values; the desk defaults above are scaled down for one CPU core.
FULL_SCALE_PRESET = {
    "data": {"frame_size": 224},
    "avnet": {"lr": 5e-5, "batch_size": 32, "decay_epochs": 2, "n_clusters": 10, "tau": 0.07},
    "vinet": {"lr": 1e-4, "batch_size": 8, "steps": 350_000,
              "weights": {"l1": 1.0, "adv": 0.01, "att_av": 2.0, "cls_av": 1.0}},
}

_CHOICES = {
    ("vinet", "mask"): ("imask", "smask"),
    ("vinet", "smask_source"): ("avnet", "gt"),
    ("metrics", "extractor"): ("avnet", "random-projection"),
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {type(value).__name__}")
        return _build(tp, value, where)
    if tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, raw: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {sorted(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}".lstrip(".")) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ConfigError(f"{where or 'config'}: {err}") from err


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.seed is None:
        raise ConfigError("seed is mandatory")
    for (section, key), allowed in _CHOICES.items():
        value = getattr(getattr(cfg, section), key)
        if value not in allowed:
            raise ConfigError(f"{section}.{key} must be one of {allowed}, got {value!r}")
    d = cfg.data
    if not 1 <= d.n_classes <= 10:
        raise ConfigError("data.n_classes must be in [1, 10]")
    if d.frame_size < 16 or d.frame_size % 16:
        raise ConfigError("data.frame_size must be a positive multiple of 16")
    if len(d.splits) != 3 or abs(sum(d.splits) - 1.0) > 1e-6 or min(d.splits) < 0:
        raise ConfigError("data.splits must be three non-negative fractions summing to 1")
    a = cfg.avnet
    if not 0 < a.tau < 1:
        raise ConfigError("avnet.tau must lie in (0, 1)")
    for name in ("c", "n_clusters", "epochs", "batch_size", "frames_per_clip"):
        if getattr(a, name) < 1:
            raise ConfigError(f"avnet.{name} must be >= 1")
    if a.lr <= 0:
        raise ConfigError("avnet.lr must be > 0")
    v = cfg.vinet
    if v.steps < 0 or v.batch_size < 1 or v.window < 2:
        raise ConfigError("vinet.steps >= 0, vinet.batch_size >= 1 and vinet.window >= 2 required")
    if not 0 <= v.decay_at <= 1 or v.lr <= 0 or v.d_lr <= 0:
        raise ConfigError("vinet learning rates must be > 0 and decay_at in [0, 1]")
    if len(v.widths) != 3 or len(v.d_widths) != 3:
        raise ConfigError("vinet.widths and vinet.d_widths need three entries each")
    for name, value in asdict(v.weights).items():
        if value < 0:
            raise ConfigError(f"vinet.weights.{name} must be >= 0")
    return cfg


def from_dict(raw: dict, overrides: dict | None = None) -> RunConfig:
    raw = _merge(raw or {}, overrides or {})
    if raw.get("seed") is None:
        raise ConfigError("seed is mandatory (set it in the config or pass --seed)")
    cfg = _build(RunConfig, raw)
    env_root = os.environ.get(DATA_ROOT_ENV)
    if env_root:
        cfg.data.root = env_root
    return validate(cfg)


def load(path=None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw, overrides)


def write_echo(cfg: RunConfig, directory) -> Path:
    """Fully resolved config, defaults included, beside an artifact."""
    path = Path(directory) / "config.resolved.yaml"
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path
