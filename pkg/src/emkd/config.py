"""Plain-text ``key = value`` config files bound to dataclasses."""

from __future__ import annotations

import dataclasses
import typing
from typing import Any, Dict, Type, TypeVar

C = TypeVar("C")


class ConfigFileError(ValueError):
    """Malformed config text, unknown key, or unparsable value."""


def parse_kv(text: str, origin: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigFileError(f"{origin}:{lineno}: empty key")
        if key in out:
            raise ConfigFileError(f"{origin}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(value: str, kind: Any, key: str) -> Any:
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {value!r} as {getattr(kind, '__name__', kind)}") from None


def from_mapping(cls: Type[C], values: Dict[str, str], origin: str = "<config>") -> C:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigFileError(f"{origin}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _convert(v, hints[k], k) for k, v in values.items()}
    return cls(**kwargs)


def load(cls: Type[C], path) -> C:
    with open(path, encoding="utf-8") as fh:
        return from_mapping(cls, parse_kv(fh.read(), str(path)), str(path))


def dumps(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj))
