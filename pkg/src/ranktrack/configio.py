"""Flat key = value config files: parse, format, digest.

The format is one `key = value` pair per line; blank lines and lines
starting with `#` are ignored. Values stay strings here; typed coercion
happens at the schema that consumes them, so error messages can name
the offending field.
"""

from __future__ import annotations

import hashlib


class ConfigError(ValueError):
    """A config file failed parsing or schema validation."""


def parse_kv(text: str) -> dict[str, str]:
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
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def format_kv(kv: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in kv.items())


def coerce(kv: dict[str, str], key: str, kind, default):
    """Typed lookup; raises ConfigError naming the field on bad values."""
    if key not in kv:
        return default
    raw = kv[key]
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"field {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


def reject_unknown(kv: dict[str, str], known: set[str]) -> None:
    unknown = sorted(set(kv) - known)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()
