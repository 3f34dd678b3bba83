"""Line-oriented ``key = value`` config files with ``#`` comments.

Both the generator config and the run config use this format.  Values are
parsed against the type of the dataclass field's default; tuples are written
comma-separated.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not a text file") from exc
    return parse_kv(text, str(path))


def _parse_scalar(value: str, kind: type, key: str):
    try:
        if kind is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


def coerce(value: str, default: Any, key: str):
    """Parse ``value`` to the type of ``default``."""
    if isinstance(default, tuple):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        inner = type(default[0]) if default else str
        return tuple(_parse_scalar(p, inner, key) for p in parts)
    if default is None:
        return value
    return _parse_scalar(value, type(default), key)


def format_value(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dataclass_from_kv(cls, kv: dict[str, str], base=None):
    """Build ``cls`` from string values; unknown keys are rejected."""
    base = base if base is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(kv) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}; valid: {', '.join(sorted(names))}")
    updates = {k: coerce(v, getattr(base, k), k) for k, v in kv.items()}
    try:
        return dataclasses.replace(base, **updates)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def dataclass_to_kv(obj) -> str:
    return "".join(f"{f.name} = {format_value(getattr(obj, f.name))}\n" for f in dataclasses.fields(obj))
