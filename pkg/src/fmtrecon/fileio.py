"""Small text formats shared across the pipeline.

Key-value files hold one `key = value` per line with `#` comments;
nodal field files carry one value per line under a `field v1` header.
"""

from __future__ import annotations

import numpy as np


class FileFormatError(Exception):
    pass


def write_kv(path, pairs):
    """Write an ordered mapping as `key = value` lines."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in pairs.items():
            fh.write(f"{key} = {value}\n")


def read_kv(path):
    """Parse a `key = value` file into a dict of strings."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FileFormatError(
                    f"{path}: line {lineno}: expected 'key = value', "
                    f"got {raw.strip()!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise FileFormatError(f"{path}: line {lineno}: empty key")
            if key in out:
                raise FileFormatError(f"{path}: line {lineno}: duplicate "
                                      f"key {key!r}")
            out[key] = value.strip()
    return out


def format_float(v):
    return f"{float(v):.17g}"


def parse_bool(s):
    if s in ("true", "True", "1", "yes"):
        return True
    if s in ("false", "False", "0", "no"):
        return False
    raise FileFormatError(f"expected a boolean, got {s!r}")


def save_field(path, values):
    """Write a nodal field file (`field v1`)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("field v1\n")
        fh.write(f"values {values.size}\n")
        for v in values:
            fh.write(f"{v:.17g}\n")


def load_field(path):
    """Read a nodal field file written by save_field."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh.read().split("\n") if ln.strip()]
    if not lines or lines[0] != "field v1":
        raise FileFormatError(f"{path}: malformed header, expected 'field v1'")
    if len(lines) < 2 or not lines[1].startswith("values "):
        raise FileFormatError(f"{path}: missing 'values <count>' line")
    try:
        count = int(lines[1].split()[1])
    except (IndexError, ValueError):
        raise FileFormatError(f"{path}: bad values count")
    body = lines[2:]
    if len(body) != count:
        raise FileFormatError(f"{path}: expected {count} values, "
                              f"found {len(body)}")
    try:
        return np.array([float(v) for v in body])
    except ValueError as exc:
        raise FileFormatError(f"{path}: bad value ({exc})") from exc
