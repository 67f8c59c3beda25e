"""
Architecture and training configuration, plus the ``key = value`` text format
used for config files and inside checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Iterable, Mapping, Tuple

from .tensor import Precision

# Per-stage widths found by ``analysis.derive_channel_config`` for stem 40,
# depths (5, 5, 5, 4) and classifier width 240 (see README, "Channel derivation").
DEFAULT_STAGE_OUT_CHANNELS = (80, 120, 240, 240)
DEFAULT_CONV_BIAS = {"stem": False, "block": True, "downsampler": True, "refiner": True}


@dataclass
class ArchConfig:
    input_size: Tuple[int, int] = (240, 240)
    num_classes: int = 5
    stem_channels: int = 40
    stage_depths: Tuple[int, ...] = (5, 5, 5, 4)
    stage_out_channels: Tuple[int, ...] = DEFAULT_STAGE_OUT_CHANNELS
    dense_connections: bool = True
    grn: bool = True
    channel_shuffle: bool = True
    refiner: bool = True
    precision: Precision = Precision.F32
    stem_bias: bool = DEFAULT_CONV_BIAS["stem"]
    block_bias: bool = DEFAULT_CONV_BIAS["block"]
    downsampler_bias: bool = DEFAULT_CONV_BIAS["downsampler"]
    refiner_bias: bool = DEFAULT_CONV_BIAS["refiner"]
    grn_per_channel: bool = True

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.stage_depths = tuple(int(v) for v in self.stage_depths)
        self.stage_out_channels = tuple(int(v) for v in self.stage_out_channels)
        self.precision = Precision.of(self.precision)
        if len(self.stage_depths) != 4 or len(self.stage_out_channels) != 4:
            raise ValueError("exactly four stage depths and four stage widths are required")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if any(d < 0 for d in self.stage_depths):
            raise ValueError("stage depths must be non-negative")

    @property
    def stage_in_channels(self) -> Tuple[int, ...]:
        return (self.stem_channels,) + self.stage_out_channels[:-1]

    def replace(self, **changes) -> "ArchConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    rms_decay: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-5
    gamma: float = 0.975
    step_size: int = 2
    epochs: int = 300
    batch_size: int = 64
    eps: float = 1e-8
    seed: int = 0
    precision: Precision = Precision.F32
    k_folds: int = 5
    augment: bool = True
    target_train_accuracy: float = 0.0

    def __post_init__(self):
        self.precision = Precision.of(self.precision)
        for name in ("lr0", "rms_decay", "gamma"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        for name in ("momentum", "weight_decay"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# -- key = value text ----------------------------------------------------------

def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Precision):
        return value.value
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, default: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, Precision):
            return Precision(raw)
        if isinstance(default, tuple):
            parts = raw.replace("x", ",").split(",")
            return tuple(int(p) for p in parts if p.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ValueError(f"bad value for {key!r}: {raw!r}") from exc
    return raw


def parse_kv_text(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Duplicate keys are errors."""
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def to_kv_text(obj) -> str:
    """Canonical text: one ``key=value`` per line, keys sorted."""
    items = {f.name: getattr(obj, f.name) for f in fields(obj)}
    return "".join(f"{k}={_format(items[k])}\n" for k in sorted(items))


def _build(cls, values: Mapping[str, str], strict: bool = True):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown and strict:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: _parse(v, getattr(defaults, k), k) for k, v in values.items() if k in known}
    return cls(**kwargs)


def arch_from_kv(values: Mapping[str, str]) -> ArchConfig:
    return _build(ArchConfig, values)


def train_from_kv(values: Mapping[str, str]) -> TrainConfig:
    return _build(TrainConfig, values)


ARCH_KEYS = frozenset(f.name for f in fields(ArchConfig))
TRAIN_KEYS = frozenset(f.name for f in fields(TrainConfig)) - {"precision"}


def split_config(values: Mapping[str, str]) -> Tuple[ArchConfig, TrainConfig]:
    """Build both configs from one flat mapping; ``precision`` feeds both."""
    unknown = set(values) - ARCH_KEYS - TRAIN_KEYS
    if unknown:
        raise KeyError(f"unknown config keys: {sorted(unknown)}")
    arch = arch_from_kv({k: v for k, v in values.items() if k in ARCH_KEYS})
    train = train_from_kv({k: v for k, v in values.items() if k in TRAIN_KEYS or k == "precision"})
    return arch, train


def load_config_file(path) -> Dict[str, str]:
    with open(path, encoding="utf-8") as f:
        return parse_kv_text(f.read())


def config_hash(*objs: Iterable) -> str:
    h = hashlib.sha256()
    for obj in objs:
        h.update(to_kv_text(obj).encode())
    return h.hexdigest()[:16]
