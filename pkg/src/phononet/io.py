"""Atomic file output and canonical JSON."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def dumps(obj) -> str:
    """Deterministic JSON: sorted keys, repr-exact floats."""
    return json.dumps(obj, indent=1, sort_keys=True, default=_default) + "\n"


def write_json(path, obj) -> Path:
    return atomic_write_text(path, dumps(obj))


def read_json(path):
    return json.loads(Path(path).read_text())
