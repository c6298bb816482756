"""INI config files mapped onto the package's frozen dataclass configs."""
from __future__ import annotations

import configparser
import dataclasses
import json
from pathlib import Path


class ConfigError(ValueError):
    pass


def _coerce(text: str, default, name: str):
    text = text.strip()
    if text.lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r}") from None
    if default is None and text[:1] in "[{":
        return json.loads(text)
    if default is None:
        parts = text.replace(",", " ").split()
        if len(parts) > 1:
            try:
                return tuple(float(v) for v in parts)
            except ValueError:
                return text
        for cast in (int, float):
            try:
                return cast(text)
            except ValueError:
                pass
    return text


def from_section(cls, section, base=None):
    """Build ``cls`` from an INI section; keys absent fall back to ``base`` or defaults."""
    base = base if base is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for key, text in (section or {}).items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        values[key] = _coerce(text, getattr(base, key), f"{cls.__name__}.{key}")
    return dataclasses.replace(base, **values)


def read_ini(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {' '.join(str(exc).split())}") from None
    return parser


def section(parser, name):
    return parser[name] if parser is not None and parser.has_section(name) else {}


def _render(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, (dict, list)):
        return json.dumps(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_ini(path, sections: dict):
    """Write every field of every config, defaults included, as an INI file."""
    parser = configparser.ConfigParser(interpolation=None)
    for name, obj in sections.items():
        items = dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else dict(obj)
        parser[name] = {k: _render(v) for k, v in items.items()}
    with open(path, "w") as fh:
        parser.write(fh)
