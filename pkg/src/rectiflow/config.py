"""Run configuration: a tree of dataclasses loaded from one JSON document plus dotted overrides."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .codec import CodecConfig
from .corruption import CorruptionConfig
from .flow import TrainConfig
from .nets import UNET_PRESETS


class ConfigError(ValueError):
    """Invalid configuration; carries the source path and the dotted field name."""

    def __init__(self, message: str, path: str | None = None, field_name: str | None = None):
        where = ", ".join(p for p in (f"file {path}" if path else "", f"field {field_name}" if field_name else "") if p)
        super().__init__(f"{message} ({where})" if where else message)
        self.path = path
        self.field = field_name


@dataclass
class DataConfig:
    n_normals: int = 1000
    image_size: int = 64
    seed: int = 1
    n_textures: int = 32
    texture_seed: int = 5
    texture_dir: str = ""

    def validate(self) -> None:
        if self.n_normals < 1 or self.image_size < 8 or self.n_textures < 0:
            raise ValueError("n_normals >= 1, image_size >= 8 and n_textures >= 0 required")


@dataclass
class NetConfig:
    kind: str = "unet"
    preset: str = "XS"

    def validate(self) -> None:
        if self.kind not in ("unet", "mlp"):
            raise ValueError(f"unknown net kind {self.kind!r}")
        if self.kind == "unet" and self.preset not in UNET_PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(UNET_PRESETS)}")


@dataclass
class EvalConfig:
    steps: tuple[int, ...] = (1, 5)
    n_cases: int = 200
    seed: int = 99
    severity_range: tuple[float, float] = (0.3, 1.0)
    dump_maps: bool = False

    def validate(self) -> None:
        if not self.steps or min(self.steps) < 1:
            raise ValueError(f"steps must be non-empty and >= 1, got {self.steps}")
        lo, hi = self.severity_range
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"severity_range must satisfy 0 < lo <= hi <= 1, got {self.severity_range}")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    corruption: CorruptionConfig = field(default_factory=CorruptionConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def validate(self, source: str | None = None) -> None:
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            if hasattr(section, "validate"):
                try:
                    section.validate()
                except ValueError as exc:
                    raise ConfigError(str(exc), source, f.name) from exc
        if self.data.image_size % max(self.codec.scale_factor, 1):
            raise ConfigError("image_size not divisible by codec scale factor", source, "data.image_size")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(value: Any, tp: Any, name: str, source: str | None) -> Any:
    origin = typing.get_origin(tp)
    try:
        if origin is tuple:
            args = typing.get_args(tp)
            items = list(value)
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_coerce(v, args[0], name, source) for v in items)
            if len(items) != len(args):
                raise ValueError(f"expected {len(args)} values, got {len(items)}")
            return tuple(_coerce(v, a, name, source) for v, a in zip(items, args))
        if tp is bool:
            if isinstance(value, str):
                if value.lower() in ("true", "1", "yes"):
                    return True
                if value.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(f"not a boolean: {value!r}")
            return bool(value)
        if tp is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {value!r}: {exc}", source, name) from exc
    return value


def _build(cls, data: dict[str, Any], prefix: str, source: str | None):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError("unknown field", source, f"{prefix}{unknown[0]}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        tp = hints[f.name]
        val = data[f.name]
        if dataclasses.is_dataclass(tp):
            if not isinstance(val, dict):
                raise ConfigError("expected an object", source, f"{prefix}{f.name}")
            kwargs[f.name] = _build(tp, val, f"{prefix}{f.name}.", source)
        else:
            kwargs[f.name] = _coerce(val, tp, f"{prefix}{f.name}", source)
    return cls(**kwargs)


def parse_override(text: str) -> tuple[list[str], Any]:
    """``"train.lr=5e-4"`` -> (["train", "lr"], value); values are parsed as JSON when possible."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path: str | Path | None = None, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    """Defaults, then the JSON file (if any), then dotted overrides; validated before return."""
    source = str(path) if path else None
    data: dict[str, Any] = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", source) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", source) from exc
        if not isinstance(data, dict):
            raise ConfigError("top level must be an object", source)
    for ov in overrides:
        keys, value = parse_override(ov)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError("cannot override inside a scalar", source, ".".join(keys))
        node[keys[-1]] = value
    cfg = _build(RunConfig, data, "", source)
    cfg.validate(source)
    return cfg


def write_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
