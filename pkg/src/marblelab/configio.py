"""Flat key=value config files and dataclass loading.

All run configuration lives in plain text files of ``key = value`` lines.
Keys may be namespaced with dots (``sim.marble_diameter``); ``#`` starts a
comment.  Values are coerced according to the dataclass field they land in,
so a config class declares its own schema.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from pathlib import Path
from typing import Any


class ConfigError(Exception):
    """Malformed config text or a value that does not fit its field."""


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines into a flat string dict."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def read_kv_file(path: str | Path) -> dict[str, str]:
    return parse_kv_text(Path(path).read_text())


def write_kv_file(path: str | Path, kv: dict[str, str]) -> None:
    lines = [f"{k} = {kv[k]}" for k in kv]
    Path(path).write_text("\n".join(lines) + "\n")


def config_hash(kv: dict[str, str]) -> str:
    """Hash of the parsed config; whitespace and comments do not matter."""
    canonical = "".join(f"{k}={kv[k]}\n" for k in sorted(kv))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _coerce(value: str, typ: Any, key: str) -> Any:
    # Optional[X] fields: treat "none" as None, otherwise coerce to X.
    args = getattr(typ, "__args__", None)
    origin = getattr(typ, "__origin__", None)
    if args and type(None) in args:
        if value.lower() in ("none", "null", ""):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, key)
    if typ is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if typ is int:
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from exc
    if typ is float:
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {value!r}") from exc
    if typ is str:
        return value
    if origin is tuple:
        elem = args[0] if args else float
        parts = [p for p in value.replace(",", " ").split() if p]
        return tuple(_coerce(p, elem, key) for p in parts)
    raise ConfigError(f"{key}: unsupported field type {typ!r}")


def load_dataclass(cls: type, kv: dict[str, str], prefix: str = ""):
    """Build a dataclass from a flat dict, using ``prefix.field`` keys.

    Unknown keys under the prefix are rejected; fields missing from the
    dict keep their dataclass defaults.
    """
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    kwargs = {}
    seen = set()
    for key, value in kv.items():
        if prefix:
            if not key.startswith(prefix + "."):
                continue
            name = key[len(prefix) + 1 :]
        else:
            if "." in key:
                continue
            name = key
        if name not in fields:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        kwargs[name] = _coerce(value, hints[name], key)
        seen.add(name)
    for name, f in fields.items():
        if name in seen:
            continue
        if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"missing required config key {prefix + '.' if prefix else ''}{name}")
    return cls(**kwargs)


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def dataclass_to_kv(obj, prefix: str = "") -> dict[str, str]:
    """Flatten a config dataclass back to key=value strings.

    Inverse of load_dataclass for the supported field types, so a config
    can be hashed or written out exactly as it would be re-read.
    """
    out: dict[str, str] = {}
    for f in dataclasses.fields(obj):
        key = f"{prefix}.{f.name}" if prefix else f.name
        out[key] = _render(getattr(obj, f.name))
    return out
