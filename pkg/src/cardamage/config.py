"""Flat dotted-key run configuration.

A schema maps keys such as ``train.lr`` to a typed field with a default.
Values come from a JSON file (flat dotted keys or nested objects) and from
command-line flags, with flags taking precedence. Unknown keys and values
that do not parse are rejected with :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


# value kinds understood by the parser
KINDS = ("int", "float", "bool", "str", "ints", "floats", "strs")


@dataclass(frozen=True)
class Field:
    key: str
    kind: str
    default: Any = None
    help: str = ""
    required: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r} for {self.key}")


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _scalar(kind: str, raw, key: str):
    try:
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in _TRUE:
                return True
            if s in _FALSE:
                return False
            raise ValueError
        if kind == "int":
            if isinstance(raw, bool) or (isinstance(raw, float) and not raw.is_integer()):
                raise ValueError
            return int(raw)
        if kind == "float":
            if isinstance(raw, bool):
                raise ValueError
            return float(raw)
        return str(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_value(field: Field, raw):
    """Convert a flag string or JSON value to the field's kind."""
    if raw is None:
        if field.required:
            raise ConfigError(f"{field.key} is required")
        return None
    if field.kind in ("ints", "floats", "strs"):
        items = raw if isinstance(raw, (list, tuple)) else [s for s in str(raw).split(",") if s.strip()]
        return tuple(_scalar(field.kind[:-1], v.strip() if isinstance(v, str) else v, field.key)
                     for v in items)
    return _scalar(field.kind, raw, field.key)


def _kind_of(value, key: str) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    if isinstance(value, str):
        return "str"
    if isinstance(value, tuple) and value:
        return _kind_of(value[0], key) + "s"
    raise ValueError(f"cannot infer a kind for {key} from default {value!r}")


def fields_from_dataclass(prefix: str, cls, exclude=(), overrides: dict | None = None) -> list[Field]:
    """One ``prefix.name`` field per dataclass field, typed by its default."""
    overrides = overrides or {}
    out = []
    for f in dataclasses.fields(cls):
        if f.name in exclude:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        key = f"{prefix}.{f.name}"
        if f.name in overrides:
            out.append(dataclasses.replace(overrides[f.name], key=key))
        else:
            out.append(Field(key, _kind_of(default, key), default))
    return out


def flatten(obj: dict, prefix: str = "") -> dict:
    """Nested JSON objects become dotted keys; already-dotted keys pass through."""
    out = {}
    for k, v in obj.items():
        key = f"{prefix}.{k}" if prefix else str(k)
        if isinstance(v, dict):
            out.update(flatten(v, key))
        else:
            out[key] = v
    return out


def load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e.msg} at line {e.lineno}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return flatten(data)


def resolve(schema: list[Field], file_values: dict, flag_values: dict) -> dict:
    """Merge defaults, file values and flags (in that order of precedence).

    Every ``<section>.seed`` key that was not set explicitly inherits the
    top-level ``seed``.
    """
    by_key = {f.key: f for f in schema}
    for source in (file_values, flag_values):
        unknown = sorted(set(source) - set(by_key))
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
    explicit = {**file_values, **flag_values}
    cfg = {}
    for f in schema:
        cfg[f.key] = parse_value(f, explicit[f.key]) if f.key in explicit else (
            parse_value(f, None) if f.required else f.default)
    if "seed" in cfg:
        for key in cfg:
            if key.endswith(".seed") and key not in explicit:
                cfg[key] = cfg["seed"]
    return cfg


def section(cfg: dict, prefix: str) -> dict:
    """Keys under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def dump(cfg: dict) -> str:
    def plain(v):
        return list(v) if isinstance(v, tuple) else v

    return json.dumps({k: plain(v) for k, v in sorted(cfg.items())}, indent=2, sort_keys=True) + "\n"
