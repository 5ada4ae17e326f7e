"""Flat ``key = value`` configuration files.

One setting per line; ``#`` starts a comment; blank lines are ignored.
Values are parsed as Python-style literals where possible (ints, floats,
``true``/``false``, comma-separated tuples) and kept as strings otherwise.
Keys may repeat only if ``allow_repeat`` is set; the last value wins.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    if "," in t:
        return tuple(parse_value(p) for p in t.split(",") if p.strip())
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v) + ("," if len(v) == 1 else "")
    if isinstance(v, float):
        return repr(v)
    return str(v)


def loads(text: str, source="<config>", allow_repeat=False) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key.replace("_", "").replace(".", "").isalnum():
            raise ConfigError(f"{source}:{n}: invalid key {key!r}")
        if key in out and not allow_repeat:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def load(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return loads(text, str(path))


def dumps(d: dict, header=None) -> str:
    lines = [f"# {h}" for h in (header or "").splitlines()]
    lines += [f"{k} = {format_value(v)}" for k, v in d.items()]
    return "\n".join(lines) + "\n"


def coerce_dataclass(cls, values: dict, strict=True):
    """Build dataclass ``cls`` from parsed values, coercing to the field defaults' types."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in values.items():
        if k not in fields:
            if strict:
                raise ConfigError(f"unknown setting {k!r} for {cls.__name__}")
            continue
        f = fields[k]
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[k] = _coerce(v, default, k)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def _coerce(v, default, key):
    if default is None or v is None:
        return v
    try:
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise ValueError
            return v
        if isinstance(default, int):
            if isinstance(v, float) and not v.is_integer():
                raise ValueError
            return int(v)
        if isinstance(default, float):
            return float(v)
        if isinstance(default, tuple):
            v = v if isinstance(v, tuple) else (v,)
            return tuple(_coerce(x, default[0], key) for x in v) if default else v
        if isinstance(default, str):
            return str(v)
    except (TypeError, ValueError):
        raise ConfigError(f"setting {key!r}: cannot use {v!r} where a {type(default).__name__} is expected")
    return v
