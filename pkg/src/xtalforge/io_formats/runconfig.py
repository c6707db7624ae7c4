"""Run-configuration files: flat ``key = value`` INI sections mapping onto the
config dataclasses. Precedence is CLI flag > config file > dataclass default.
"""

from __future__ import annotations

import configparser
import dataclasses

from ..errors import XtalError

__all__ = ["read_config_file", "resolve_config"]

SECTIONS = ("guidance", "refine", "forward")


def read_config_file(path) -> dict:
    """Parse sections [guidance], [refine], [forward] into string dicts."""
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise XtalError(f"unknown config section [{section}] (expected one of {SECTIONS})")
        out[section] = dict(parser.items(section))
    return out


def _coerce(field: dataclasses.Field, text: str):
    target = field.type if isinstance(field.type, type) else str(field.type)
    name = target.__name__ if isinstance(target, type) else target
    text = text.strip()
    if "bool" in name:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise XtalError(f"cannot parse boolean config value {text!r} for {field.name}")
    if "int" in name:
        return int(text)
    if "float" in name:
        return float(text)
    return text


def resolve_config(config_cls, file_values: dict | None = None, overrides: dict | None = None):
    """Materialize a config dataclass from defaults, file values and overrides.

    ``overrides`` entries that are None are ignored (unset CLI flags).
    """
    fields = {f.name: f for f in dataclasses.fields(config_cls)}
    kwargs = {}
    for key, text in (file_values or {}).items():
        if key not in fields:
            raise XtalError(
                f"unknown config key {key!r} for [{config_cls.__name__}] "
                f"(valid: {', '.join(sorted(fields))})"
            )
        kwargs[key] = _coerce(fields[key], text)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in fields:
            raise XtalError(f"unknown config override {key!r} for {config_cls.__name__}")
        kwargs[key] = value
    return config_cls(**kwargs)
