"""Run configuration: nested dataclasses, strict JSON loading and dotted overrides."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .dataio import AugmentConfig, SyntheticParams
from .evaluation import EvalConfig
from .network import ArchConfig
from .trainer import MaskConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data: str = ""
    masks: str = ""
    checkpoint: str = ""
    embeddings: str = ""
    manifest: str = ""
    resume: str = ""
    case_ids: tuple[int, ...] = ()


@dataclass
class RunConfig:
    data: SyntheticParams = field(default_factory=SyntheticParams)
    masks: MaskConfig = field(default_factory=MaskConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)


def to_dict(obj) -> dict[str, Any]:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (list, tuple)):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(obj)


def from_dict(cls, data: dict[str, Any], where: str = ""):
    """Build dataclass ``cls`` from ``data``, rejecting keys it does not declare."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = from_dict(tp, value, f"{where}{name}.")
        elif typing.get_origin(tp) is tuple and isinstance(value, list):
            kwargs[name] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _leaf_paths(cls, prefix: str = "") -> list[str]:
    out = []
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            out += _leaf_paths(tp, f"{prefix}{f.name}.")
        else:
            out.append(prefix + f.name)
    return out


def resolve_key(key: str, cls=RunConfig) -> str:
    """Map a dotted key to a full leaf path; a unique suffix such as ``epochs`` or ``contrast.tau`` is enough."""
    paths = _leaf_paths(cls)
    if key in paths:
        return key
    hits = [p for p in paths if p.endswith("." + key)]
    if len(hits) == 1:
        return hits[0]
    if not hits:
        raise ConfigError(f"unknown config key {key!r}")
    raise ConfigError(f"ambiguous config key {key!r}: {', '.join(hits)}")


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict[str, Any], overrides: list[str], cls=RunConfig) -> dict[str, Any]:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        path = resolve_key(key.strip(), cls).split(".")
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = parse_value(raw.strip())
    return data


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> RunConfig:
    """Defaults, then the JSON file, then overrides."""
    data: dict[str, Any] = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    data = apply_overrides(data, list(overrides))
    cfg = from_dict(RunConfig, data)
    return cfg


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")


__all__ = [
    "AugmentConfig",
    "ConfigError",
    "PathsConfig",
    "RunConfig",
    "apply_overrides",
    "dump_config",
    "from_dict",
    "load_config",
    "resolve_key",
    "to_dict",
]
