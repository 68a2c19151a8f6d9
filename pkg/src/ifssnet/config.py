"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored. Values are typed from the
defaults of the dataclass they configure; tuples are comma separated.
Unknown keys are errors, so a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import os
from typing import Iterable

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


def parse_config(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def read_config(path: str | os.PathLike | None) -> dict[str, str]:
    if path is None:
        return {}
    with open(path) as fh:
        return parse_config(fh.read(), str(path))


def convert(value: str, default, key: str = "?"):
    """Coerce ``value`` to the type of ``default``."""
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            elem = default[0] if default else str
            kind = type(elem) if not isinstance(elem, type) else elem
            return tuple(kind(v.strip()) for v in value.split(",") if v.strip())
        if default is None:
            return None if value.lower() in ("", "none") else value
        return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc


def split_for(cls, values: dict[str, str]) -> tuple[dict, dict[str, str]]:
    """Typed kwargs for dataclass ``cls`` and the keys it did not consume."""
    kwargs, rest = {}, dict(values)
    for f in dataclasses.fields(cls):
        if f.name in rest:
            if f.default is not dataclasses.MISSING:
                default = f.default
            elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
                default = f.default_factory()  # type: ignore[misc]
            else:
                default = ""
            kwargs[f.name] = convert(rest.pop(f.name), default, f.name)
    return kwargs, rest


def take(values: dict[str, str], key: str, default):
    """Pop one extra key, typed like ``default``."""
    if key not in values:
        return default
    return convert(values.pop(key), default, key)


def reject_unknown(values: dict[str, str], allowed: Iterable[str] = ()) -> None:
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
