"""Flat ``key = value`` configuration text.

One assignment per line, ``#`` starts a comment, blank lines ignored.
Values are typed against a dataclass's field defaults, so a config
round-trips losslessly: parse -> dataclass -> format -> parse.
"""

from __future__ import annotations

import dataclasses


def parse_flat(text: str) -> dict[str, str]:
    """Parse flat config text into an ordered key -> raw-string map."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def format_flat(values: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return v
    if isinstance(v, tuple):
        return ",".join(_format_value(e) for e in v)
    raise TypeError(f"unsupported config value type {type(v).__name__}")


def _parse_value(raw: str, template):
    if isinstance(template, bool):
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ValueError(f"expected true/false, got {raw!r}")
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, str):
        return raw
    if isinstance(template, tuple):
        if raw == "":
            return ()
        elem = template[0] if template else 0.0
        return tuple(_parse_value(p.strip(), elem) for p in raw.split(","))
    raise TypeError(f"unsupported config value type {type(template).__name__}")


def dataclass_to_flat(obj) -> dict[str, str]:
    """Render a config dataclass as an ordered key -> string map."""
    return {f.name: _format_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def dataclass_from_flat(cls, values: dict[str, str], **overrides):
    """Build a config dataclass from parsed flat values, typed by defaults.

    Unknown keys are rejected; missing keys keep the field default.
    """
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            kwargs[f.name] = _parse_value(values[f.name], getattr(defaults, f.name))
    kwargs.update(overrides)
    return cls(**kwargs)
