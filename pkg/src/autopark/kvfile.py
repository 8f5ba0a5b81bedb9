"""``key = value`` text files mapped onto dataclasses."""

import dataclasses


def _coerce(value: str, kind):
    if kind in (bool, "bool"):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value.strip().strip('"')


def parse_pairs(text: str):
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_into(cls, text: str, **overrides):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in parse_pairs(text).items():
        if key not in fields:
            raise ValueError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[key] = _coerce(value, fields[key].type)
    kwargs.update(overrides)
    return cls(**kwargs)


def dump(obj) -> str:
    return "".join(f"{f.name} = {getattr(obj, f.name)}\n" for f in dataclasses.fields(obj))
