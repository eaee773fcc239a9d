"""INI experiment configs: parse, validate, serialize, hash.

Sections mirror :class:`ExperimentConfig`: ``[data]``, ``[patchwork]``,
``[train]``, ``[fusion]``, ``[eval]`` and ``[run]``. Missing keys take their
defaults; unknown sections or keys are rejected. ``train.lambda`` is spelled
without the trailing underscore used in Python.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from pathlib import Path

from .errors import ConfigurationError
from .experiment import ExperimentConfig

_RENAMES = {"lambda_": "lambda"}


class ConfigFileError(ConfigurationError):
    """The file could not be read or parsed."""


class UnknownKeyError(ConfigurationError):
    """A section or key that the schema does not define."""


class ValueTypeError(ConfigurationError):
    """A value that does not parse as the key's type."""


def _fields(section):
    return {_RENAMES.get(f.name, f.name): f for f in dataclasses.fields(section)}


def _convert(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            value = raw.strip().lower()
            if value in ("1", "true", "yes", "on"):
                return True
            if value in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(",") if x.strip())
        return raw.strip()
    except ValueError:
        kind = type(default).__name__ if not isinstance(default, tuple) else "comma-separated floats"
        raise ValueTypeError(f"invalid value for '{key}': {raw!r} is not {kind}") from None


def parse_string(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigFileError(f"malformed config {source}: {exc}") from None
    cfg = ExperimentConfig()
    sections = {f.name: f for f in dataclasses.fields(cfg)}
    for name in parser.sections():
        if name not in sections:
            raise UnknownKeyError(f"unknown section '[{name}]' in {source}")
        target = getattr(cfg, name)
        fields = _fields(target)
        for key, raw in parser.items(name):
            if key not in fields:
                raise UnknownKeyError(f"unknown key '{name}.{key}' in {source}")
            f = fields[key]
            setattr(target, f.name, _convert(raw, getattr(target, f.name), f"{name}.{key}"))
    return cfg.validate()


def parse_config(path) -> ExperimentConfig:
    """Read and validate a config file; errors name the offending key."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigFileError(f"cannot read config file {path}: {exc}") from None
    return parse_string(text, str(path))


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical INI text; every key is written, so parsing it back is lossless."""
    lines = []
    for section in dataclasses.fields(cfg):
        lines.append(f"[{section.name}]")
        values = getattr(cfg, section.name)
        for key, f in _fields(values).items():
            v = getattr(values, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(float(x)) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key} = {v}")
        lines.append("")
    return "\n".join(lines)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()
