"""Deterministic JSON emission for polytopes, configs and synthesis artifacts.

The stock json module formats floats with repr (shortest round-trip), which is
lossless but not byte-stable across value provenance (0.1 vs 0.1000...). Here
every float is written with 17 significant digits, which round-trips float64
exactly and makes artifact files byte-identical for identical inputs.
"""

from __future__ import annotations

import hashlib
import json
import math

import numpy as np


def _emit(obj, parts):
    if obj is None:
        parts.append("null")
    elif obj is True:
        parts.append("true")
    elif obj is False:
        parts.append("false")
    elif isinstance(obj, (int, np.integer)):
        parts.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x) or math.isinf(x):
            raise ValueError("non-finite float in serialized object")
        parts.append(format(x, ".17g"))
    elif isinstance(obj, str):
        parts.append(json.dumps(obj))
    elif isinstance(obj, np.ndarray):
        _emit(obj.tolist(), parts)
    elif isinstance(obj, (list, tuple)):
        parts.append("[")
        for i, v in enumerate(obj):
            if i:
                parts.append(",")
            _emit(v, parts)
        parts.append("]")
    elif isinstance(obj, dict):
        parts.append("{")
        for i, k in enumerate(obj):
            if not isinstance(k, str):
                raise TypeError(f"non-string key {k!r}")
            if i:
                parts.append(",")
            parts.append(json.dumps(k))
            parts.append(":")
            _emit(obj[k], parts)
        parts.append("}")
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj) -> str:
    """Serialize to JSON with floats at 17 significant digits, keys kept in order."""
    parts = []
    _emit(obj, parts)
    return "".join(parts)


def dumps_canonical(obj) -> str:
    """Like dumps but with dict keys sorted recursively, for fingerprinting."""
    return dumps(_sort(obj))


def _sort(obj):
    if isinstance(obj, dict):
        return {k: _sort(obj[k]) for k in sorted(obj)}
    if isinstance(obj, (list, tuple)):
        return [_sort(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _sort(obj.tolist())
    return obj


def fingerprint(obj) -> str:
    """sha256 hex digest of the canonical JSON form."""
    return hashlib.sha256(dumps_canonical(obj).encode("utf-8")).hexdigest()
