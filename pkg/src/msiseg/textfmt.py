"""UTF-8 ``key: value`` text format with optional ``[block]`` sections.

Used for scene specs, run configs and manifests::

    seed: 7
    extent_m: 48

    [region]
    shape: rect
    class_id: 3
    bounds: 0, 0, 10, 20

Top-level keys precede the first block header.  ``#`` starts a comment.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

from .errors import FormatError


def parse_text(text: str) -> tuple[dict[str, str], list[tuple[str, dict[str, str]]]]:
    top: dict[str, str] = {}
    blocks: list[tuple[str, dict[str, str]]] = []
    current = top
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise FormatError(f"line {lineno}: empty block name")
            current = {}
            blocks.append((name, current))
            continue
        if ":" not in line:
            raise FormatError(f"line {lineno}: expected 'key: value', got {raw!r}")
        key, value = line.split(":", 1)
        key = key.strip()
        if key in current:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        current[key] = value.strip()
    return top, blocks


def dump_text(top: dict, blocks: list[tuple[str, dict]] = ()) -> str:
    lines = [f"{k}: {_fmt(v)}" for k, v in top.items()]
    for name, body in blocks:
        lines.append("")
        lines.append(f"[{name}]")
        lines.extend(f"{k}: {_fmt(v)}" for k, v in body.items())
    return "\n".join(lines) + "\n"


def read_text(path) -> tuple[dict[str, str], list[tuple[str, dict[str, str]]]]:
    return parse_text(Path(path).read_text(encoding="utf-8"))


def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    if value is None:
        return "none"
    return str(value)


def coerce(value: str, annotation):
    """Convert a text value to ``annotation`` (int/float/str/bool/tuple/Optional)."""
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value.lower() in ("none", ""):
            return None
        return coerce(value, args[0])
    if annotation in (tuple, list):
        return tuple(_auto(v.strip()) for v in value.split(",") if v.strip())
    if origin in (tuple, list):
        args = typing.get_args(annotation)
        items = [v.strip() for v in value.split(",") if v.strip()]
        return tuple(coerce(v, args[0] if args else str) for v in items)
    if annotation is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise FormatError(f"not a boolean: {value!r}")
    if annotation in (int, float, str):
        try:
            return annotation(value)
        except ValueError as exc:
            raise FormatError(f"cannot parse {value!r} as {annotation.__name__}") from exc
    return value


def _auto(value: str):
    """Item of an untyped tuple: int, else float, else the string itself."""
    for kind in (int, float):
        try:
            return kind(value)
        except ValueError:
            pass
    return value


def from_mapping(cls, mapping: dict[str, str], strict: bool = True, **fixed):
    """Build dataclass ``cls`` from string values; unknown keys are rejected."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(mapping) - names
    if strict and unknown:
        raise FormatError(f"unknown keys for {cls.__name__}: {', '.join(sorted(unknown))}")
    kwargs = dict(fixed)
    for key, value in mapping.items():
        if key in names:
            kwargs[key] = coerce(value, hints[key]) if isinstance(value, str) else value
    return cls(**kwargs)
