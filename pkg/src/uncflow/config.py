"""INI-style run configuration with typed values.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` and
``;`` start comments.  Known sections map onto dataclasses and each value is
coerced to the type of the matching field (int, float, bool, str, or a
comma-separated pair for tuple fields).  Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

from .augment import AugmentBounds
from .errors import ContractViolation
from .losses import LossWeights
from .model import ModelConfig
from .synth import SynthConfig
from .train import TrainConfig


@dataclass
class DataConfig:
    train_size: int = 200
    val_size: int = 40
    seed: int = 0
    val_seed: int = 100_000
    directory: str = ""  # load a saved dataset instead of generating


@dataclass
class FusionConfig:
    theta: float = 35.0
    steps: int = 300
    lr: float = 1e-3
    batch_size: int = 4
    width: int = 32
    train_size: int = 48
    seed: int = 0


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)


# section name -> path of attributes from RunConfig
SECTIONS = {
    "train": ("train",),
    "model": ("train", "model"),
    "loss": ("train", "weights"),
    "augment": ("train", "augment"),
    "data": ("data",),
    "synth": ("synth",),
    "fusion": ("fusion",),
}


def _coerce(raw: str, typ, where: str):
    origin = typing.get_origin(typ)
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip()
        if origin is tuple:
            args = typing.get_args(typ)
            parts = [p.strip() for p in raw.split(",")]
            if len(parts) != len(args):
                raise ValueError(raw)
            return tuple(a(p) for a, p in zip(args, parts))
    except ValueError:
        raise ContractViolation(f"{where}: cannot read {raw!r} as {getattr(typ, '__name__', typ)}") from None
    raise ContractViolation(f"{where}: unsupported field type {typ}")


def _target(cfg: RunConfig, path):
    obj = cfg
    for attr in path:
        obj = getattr(obj, attr)
    return obj


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ContractViolation(f"config syntax error: {exc}") from None
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ContractViolation(f"unknown config section [{section}]")
        obj = _target(cfg, SECTIONS[section])
        hints = typing.get_type_hints(type(obj))
        names = {f.name for f in dataclasses.fields(obj)}
        for key, raw in parser.items(section):
            if key not in names or dataclasses.is_dataclass(hints.get(key)):
                raise ContractViolation(f"unknown key {key!r} in [{section}]")
            setattr(obj, key, _coerce(raw, hints[key], f"[{section}] {key}"))
    cfg.train.validate()
    cfg.synth.validate()
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config` for every scalar field."""
    lines = []
    for section, path in SECTIONS.items():
        obj = _target(cfg, path)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                continue
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)


def as_dict(cfg: RunConfig) -> Dict[str, Any]:
    return dataclasses.asdict(cfg)
