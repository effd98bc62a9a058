"""Run configuration: strict key=value files, flag overrides, snapshots.

A run is configured by four sections (model, scene, sta, train) whose keys
mirror the corresponding dataclass fields, written one ``section.field =
value`` per line.  Parsing is strict: unknown keys, bad types, and malformed
lines are reported with the file name and line number.  Overrides use the
same ``key=value`` syntax and win over the file.  Every command writes back a
resolved snapshot that the same parser accepts, so any run can be reproduced
from its output directory alone.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass
from pathlib import Path

from .augment import StaConfig
from .model import ModelConfig
from .synthdata import SceneConfig

__all__ = [
    "ConfigError",
    "TrainConfig",
    "RunConfig",
    "load_run_config",
    "parse_assignments",
    "resolved_snapshot",
]


class ConfigError(Exception):
    """Configuration problem; message carries file:line context when known."""


@dataclass(frozen=True)
class TrainConfig:
    """Training-loop settings not owned by the model itself."""

    steps: int = 200
    batch_size: int = 1
    log_every: int = 10
    checkpoint_every: int = 200
    single_thread: bool = True
    holdout: bool = True

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ValueError("log_every and checkpoint_every must be positive")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    scene: SceneConfig
    sta: StaConfig
    train: TrainConfig


_SECTIONS = {
    "model": ModelConfig,
    "scene": SceneConfig,
    "sta": StaConfig,
    "train": TrainConfig,
}

# Fields that cannot round-trip through flat text (structured payloads).
_SKIPPED_FIELDS = {("scene", "primitives")}


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    raise ValueError(f"expected true or false, got {text!r}")


def _tuple_parser(inner, arity):
    def parse(text: str):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if arity is not None and len(parts) != arity:
            raise ValueError(f"expected {arity} comma-separated values, got {len(parts)}")
        if not parts:
            raise ValueError("expected at least one value")
        return tuple(inner(p) for p in parts)

    return parse


def _optional_parser(inner):
    def parse(text: str):
        if text.lower() == "none":
            return None
        return inner(text)

    return parse


def _converter_for(annotation):
    """Maps a resolved type annotation to a text parser, or None if unsupported."""
    if annotation is int:
        return int
    if annotation is float:
        return float
    if annotation is str:
        return str
    if annotation is bool:
        return _parse_bool
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin is tuple and args:
        if args[-1] is Ellipsis:
            return _tuple_parser(_converter_for(args[0]), None)
        inners = {a for a in args}
        if len(inners) == 1:
            return _tuple_parser(_converter_for(args[0]), len(args))
        return None
    if origin is typing.Union or origin is types.UnionType:
        non_none = [a for a in args if a is not type(None)]
        if len(non_none) == 1:
            inner = _converter_for(non_none[0])
            if inner is not None:
                return _optional_parser(inner)
    return None


def _build_schema() -> dict[str, typing.Callable]:
    schema = {}
    for section, cls in _SECTIONS.items():
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            if (section, f.name) in _SKIPPED_FIELDS:
                continue
            converter = _converter_for(hints[f.name])
            if converter is None:
                continue
            schema[f"{section}.{f.name}"] = converter
    return schema


_SCHEMA = _build_schema()


def _parse_line(line: str, where: str) -> tuple[str, object] | None:
    stripped = line.split("#", 1)[0].strip()
    if not stripped:
        return None
    if "=" not in stripped:
        raise ConfigError(f"{where}: expected 'key = value', got {stripped!r}")
    key, _, raw_value = stripped.partition("=")
    key = key.strip()
    raw_value = raw_value.strip()
    if key not in _SCHEMA:
        known = ", ".join(sorted({k.split(".")[0] for k in _SCHEMA}))
        raise ConfigError(f"{where}: unknown key {key!r} (sections: {known})")
    try:
        return key, _SCHEMA[key](raw_value)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None


def parse_assignments(lines, source: str) -> dict[str, object]:
    """Parses key=value lines; ``source`` names the origin in error messages."""
    values: dict[str, object] = {}
    for i, line in enumerate(lines, start=1):
        where = f"{source}:{i}" if source else f"line {i}"
        parsed = _parse_line(line, where)
        if parsed is not None:
            values[parsed[0]] = parsed[1]
    return values


def load_run_config(
    config_path: str | Path | None = None, overrides: list[str] | None = None
) -> RunConfig:
    """Defaults, then the file, then overrides; strict at every layer."""
    values: dict[str, object] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_assignments(path.read_text().splitlines(), str(path)))
    for entry in overrides or []:
        parsed = _parse_line(entry, f"override {entry!r}")
        if parsed is None:
            raise ConfigError(f"override {entry!r}: empty assignment")
        values[parsed[0]] = parsed[1]

    kwargs: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    for key, value in values.items():
        section, _, field_name = key.partition(".")
        kwargs[section][field_name] = value
    built = {}
    for section, cls in _SECTIONS.items():
        try:
            built[section] = cls(**kwargs[section])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"section {section!r}: {exc}") from None
    return RunConfig(**built)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def resolved_snapshot(config: RunConfig) -> str:
    """Serializes the full configuration in the parser's own format."""
    lines = ["# resolved configuration"]
    for section in _SECTIONS:
        section_obj = getattr(config, section)
        for f in dataclasses.fields(section_obj):
            key = f"{section}.{f.name}"
            if key not in _SCHEMA:
                continue
            lines.append(f"{key} = {_format_value(getattr(section_obj, f.name))}")
    return "\n".join(lines) + "\n"
