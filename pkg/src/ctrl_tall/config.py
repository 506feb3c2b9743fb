"""key=value config files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import difflib
import types
import typing
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    path = Path(path)
    return parse_kv_text(path.read_text(encoding="utf-8"), str(path))


def format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def to_kv_text(*objs: Any) -> str:
    lines = []
    for obj in objs:
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name}={format_value(getattr(obj, f.name))}")
    return "".join(line + "\n" for line in lines)


def unknown_key_error(key: str, known: Iterable[str]) -> ConfigError:
    close = difflib.get_close_matches(key, list(known), n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return ConfigError(f"unknown config key {key!r}{hint}")


def check_keys(values: Mapping[str, Any], known: Iterable[str]) -> None:
    known = list(known)
    for key in values:
        if key not in known:
            raise unknown_key_error(key, known)


def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if raw.lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(raw, inner[0], key)
    if origin in (tuple, list):
        item = args[0] if args else str
        return tuple(_coerce(p.strip(), item, key) for p in raw.split(",") if p.strip())
    try:
        if tp is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {tp.__name__}") from None
    return raw


def from_kv(cls, values: Mapping[str, Any], strict: bool = True):
    """Build dataclass ``cls`` from string (or already typed) values."""
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    if strict:
        check_keys(values, names)
    kwargs = {}
    for name in names:
        if name in values:
            v = values[name]
            kwargs[name] = _coerce(v, hints[name], name) if isinstance(v, str) else v
    return cls(**kwargs)
