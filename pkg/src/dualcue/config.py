"""Run configuration: INI sections mapped onto dataclasses, unknown keys rejected.

Sections: ``[model]`` (ViT shape), ``[train]``, ``[loss]``, ``[synth]``,
``[data]`` and ``[output]``. Every key has a default; ``dualcue config`` prints
the full default file.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone import ViTConfig
from .datasets import SynthConfig
from .errors import ConfigurationError
from .framework import LossConfig, TrainConfig


@dataclass
class DataConfig:
    train_manifest: str = ""
    val_split: str = "val"


@dataclass
class OutputConfig:
    dir: str = "runs/default"


SECTIONS = {
    "model": ViTConfig,
    "train": TrainConfig,
    "loss": LossConfig,
    "synth": SynthConfig,
    "data": DataConfig,
    "output": OutputConfig,
}


@dataclass
class RunConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_ini(self):
        parser = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            parser[name] = {k: _fmt(v) for k, v in asdict(getattr(self, name)).items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_ini())


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(cls, key, raw):
    defaults = cls()
    default = getattr(defaults, key)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigurationError(f"{cls.__name__}.{key}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


def _build(values):
    kwargs = {}
    for section, cls in SECTIONS.items():
        given = values.get(section, {})
        known = {f.name for f in fields(cls)}
        unknown = set(given) - known
        if unknown:
            raise ConfigurationError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
        kwargs[section] = cls(**{k: _coerce(cls, k, v) for k, v in given.items()})
    return RunConfig(**kwargs)


def parse_overrides(items):
    """``["train.epochs=3", ...]`` -> ``{"train": {"epochs": "3"}}``."""
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigurationError(f"override {item!r} must look like section.key=value")
        out.setdefault(section, {})[name] = value
    return out


def load_config(path=None, overrides=None):
    """Merge defaults, an optional INI file, then ``section.key=value`` overrides."""
    values = {}
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            read = parser.read(path)
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse config {path}: {exc}") from exc
        if not read:
            raise ConfigurationError(f"config file not found: {path}")
        for section in parser.sections():
            values[section] = dict(parser[section])
    for section, kv in parse_overrides(overrides).items():
        values.setdefault(section, {}).update(kv)
    unknown = set(values) - set(SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config section(s): {sorted(unknown)}")
    return _build(values)
