"""Run configuration: a flat INI file with sections, overridable from the
command line.  parse -> serialize -> parse is an identity, so a saved config
is a complete, reproducible experiment manifest.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

from .fields import STRIDES
from .renderer import SAMPLERS

__all__ = ["RunConfig", "ConfigError", "load_config", "save_config", "parse_grid"]

_LEVELS = len(STRIDES)


class ConfigError(ValueError):
    pass


def parse_grid(text: str) -> tuple[int, int]:
    """Parse 'HxW' into (H, W)."""
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"ray grid must look like 16x16, got {text!r}")
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ConfigError(f"ray grid must be integers, got {text!r}") from exc
    if h <= 0 or w <= 0:
        raise ConfigError(f"ray grid dims must be positive, got {text!r}")
    return h, w


@dataclass
class RunConfig:
    # paths ("" means not set)
    cloud: str = ""
    cameras: str = ""
    scene: str = ""
    checkpoint: str = ""
    images: str = ""
    out: str = "out"
    # sampling
    sampler: str = "point"
    radius: float = 0.08
    samples: int = 128
    grid: tuple[int, int] = (16, 16)
    # model
    levels: int = _LEVELS
    cell: float = 0.08
    seed: int = 0
    # training
    steps: int = 2000
    eval_interval: int = 50
    lr_start: float = 4e-3
    lr_end: float = 4e-4
    pc_batch: int = 1024
    # loss weights
    w_pc: float = 0.1
    w_nr: float = 1.0
    w_per: float = 0.1
    density_threshold: float = 10.0

    def __post_init__(self):
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.levels != _LEVELS:
            raise ConfigError(f"this architecture has exactly {_LEVELS} feature scales, got levels={self.levels}")
        if self.radius <= 0 or self.cell <= 0:
            raise ConfigError("radius and cell must be positive")
        if self.radius > self.cell + 1e-12:
            raise ConfigError(f"radius {self.radius} must not exceed the index cell {self.cell}")
        for name in ("samples", "steps", "eval_interval", "pc_batch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if min(self.grid) <= 0:
            raise ConfigError(f"grid dims must be positive, got {self.grid}")
        for name in ("w_pc", "w_nr", "w_per"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")


_SECTIONS = {
    "paths": ("cloud", "cameras", "scene", "checkpoint", "images", "out"),
    "sampling": ("sampler", "radius", "samples", "grid"),
    "model": ("levels", "cell", "seed"),
    "train": ("steps", "eval_interval", "lr_start", "lr_end", "pc_batch"),
    "loss": ("w_pc", "w_nr", "w_per", "density_threshold"),
}
_FIELD_TYPES = {f.name: f.type for f in dc_fields(RunConfig)}


def _format_value(name: str, value) -> str:
    if name == "grid":
        return f"{value[0]}x{value[1]}"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, text: str):
    if name == "grid":
        return parse_grid(text)
    kind = _FIELD_TYPES[name]
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    return text


def save_config(config: RunConfig, path: str | Path) -> None:
    parser = configparser.ConfigParser()
    for section, names in _SECTIONS.items():
        parser[section] = {name: _format_value(name, getattr(config, name)) for name in names}
    with open(path, "w") as fh:
        parser.write(fh)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for name, text in parser[section].items():
            if name not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {name!r} in section [{section}]")
            try:
                values[name] = _parse_value(name, text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {name!r}: {text!r}") from exc
    return RunConfig(**values)
