"""Flat ``key = value`` config files, shared by run configs and dataset specs.

Blank lines and ``#`` comments are ignored.  Values are coerced using the
target dataclass's field defaults; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(name: str, value: str, default):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
        if default is None:
            return None if value.lower() in ("", "none") else float(value)
        return value
    except ValueError:
        raise ConfigError(f"field {name!r}: cannot parse {value!r}") from None


def build(cls, values: dict[str, str], source: str = "<config>"):
    """Instantiate dataclass ``cls`` from string values, defaults filling the gaps."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {', '.join(unknown)}")
    defaults = cls()
    kwargs = {k: _coerce(k, v, getattr(defaults, k)) for k, v in values.items()}
    try:
        return dataclasses.replace(defaults, **kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load(cls, path) -> object:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return build(cls, parse_kv(text, str(path)), str(path))


def dump(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(i) for i in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
