"""Run configuration: INI files whose sections map onto the training dataclasses.

Every field has a default; a file only lists what it changes. ``--set
section.key=value`` overrides are applied on top, and the resolved
configuration is hashed so every artifact can name the exact settings that
produced it.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .distill import DistillConfig
from .engine import TrainConfig
from .evaluation import ProbeConfig


class ConfigError(ValueError):
    """Bad configuration file, unknown key or unparsable value."""


@dataclass
class DataSection:
    # "synthetic" generates from the spec below; "manifest" reads dataset.csv files
    source: str = "synthetic"
    manifest: str = ""
    topology: str = ""
    split: str = "cross-subject"
    train_keys: tuple[int, ...] = ()
    fraction: float = 0.8
    class_count: int = 3
    samples_per_class: int = 20
    frame_choices: tuple[int, ...] = (40, 50, 100)
    noise: float = 0.01
    fps: float = 20.0
    subjects: int = 6
    cameras: int = 3
    amplitude_jitter: float = 0.1
    seed: int = 7


@dataclass
class EvalSection:
    fusion: bool = True
    knn_k: int = 0
    streams: tuple[str, ...] = ()


SECTIONS: dict[str, type] = {
    "data": DataSection,
    "pretrain": TrainConfig,
    "distill": DistillConfig,
    "probe": ProbeConfig,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for k, v in dataclasses.asdict(getattr(self, name)).items():
                lines.append(f"{k} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)


def _format(v: Any) -> str:
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(raw: str, hint, where: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    try:
        if origin is tuple:
            (elem, *_rest) = typing.get_args(hint)
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(_coerce(s, elem, where) for s in items)
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _field_types(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def build_config(sections: dict[str, dict[str, str]]) -> RunConfig:
    """Resolve raw string values onto the section dataclasses."""
    built = {}
    for name, raw in sections.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]; expected one of {sorted(SECTIONS)}")
    for name, cls in SECTIONS.items():
        types = _field_types(cls)
        values = {}
        for key, text in sections.get(name, {}).items():
            if key not in types:
                raise ConfigError(f"unknown key {name}.{key}")
            values[key] = _coerce(text, types[key], f"{name}.{key}")
        try:
            built[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from None
    return RunConfig(**built)


def parse_overrides(items: Iterable[str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        out.setdefault(section, {})[key.strip()] = value
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    sections: dict[str, dict[str, str]] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        sections = {s: dict(parser[s]) for s in parser.sections()}
    for section, values in parse_overrides(overrides).items():
        sections.setdefault(section, {}).update(values)
    return build_config(sections)
