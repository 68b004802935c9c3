"""Deterministic JSON output with 17-significant-digit floats."""

from __future__ import annotations

import json
import math

import numpy as np


def _float(x: float) -> str:
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    text = f"{x:.17g}"
    # keep floats recognizable as floats on reload
    if all(c not in text for c in ".eEn"):
        text += ".0"
    return text


def _encode(obj, indent, level, out):
    pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
    end = "" if indent is None else "\n" + " " * (indent * level)
    sep = ", " if indent is None else ","
    if obj is None or isinstance(obj, (bool, np.bool_)):
        out.append({None: "null", True: "true", False: "false"}[None if obj is None else bool(obj)])
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(_float(float(obj)))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{")
        for i, (k, v) in enumerate(obj.items()):
            if i:
                out.append(sep)
            out.append(pad)
            _encode(str(k), indent, level + 1, out)
            out.append(": ")
            _encode(v, indent, level + 1, out)
        out.append(end + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        items = obj.tolist() if isinstance(obj, np.ndarray) else obj
        if not items:
            out.append("[]")
            return
        out.append("[")
        for i, v in enumerate(items):
            if i:
                out.append(sep)
            out.append(pad)
            _encode(v, indent, level + 1, out)
        out.append(end + "]")
    else:
        raise TypeError(f"cannot encode {type(obj).__name__} as JSON")


def dumps(obj, indent: int | None = 2) -> str:
    """Serialize ``obj``; floats print with 17 significant digits so they round-trip."""
    out: list[str] = []
    _encode(obj, indent, 0, out)
    return "".join(out)
