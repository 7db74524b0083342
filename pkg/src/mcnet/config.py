"""Flat ``key=value`` config files (one setting per line, ``#`` comments)."""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def format_kv(values: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in values.items())


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())
