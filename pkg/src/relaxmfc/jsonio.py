"""JSON emission with fixed 17-significant-digit floats.

``json.dumps`` uses the shortest round-trip repr, which makes byte-level
comparison of artifacts depend on the float formatting; every artifact in
this package goes through :func:`dumps` instead.
"""

import json
import math

import numpy as np


def _fmt_float(x):
    if not math.isfinite(x):
        # JSON has no inf/nan; keep them readable and loadable by json.loads
        return "NaN" if math.isnan(x) else ("Infinity" if x > 0 else "-Infinity")
    s = format(x, ".17g")
    if "e" not in s and "." not in s and "n" not in s:
        s += ".0"
    return s


def _encode(obj, indent, level):
    pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
    end = "" if indent is None else "\n" + " " * (indent * level)
    sep = ", " if indent is None else ","
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [
            pad + json.dumps(str(k)) + ": " + _encode(v, indent, level + 1)
            for k, v in obj.items()
        ]
        return "{" + sep.join(items) + end + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        # numeric leaf rows stay on one line
        if all(not isinstance(v, (list, tuple, dict, np.ndarray)) for v in obj):
            return "[" + ", ".join(_encode(v, None, 0) for v in obj) + "]"
        items = [pad + _encode(v, indent, level + 1) for v in obj]
        return "[" + sep.join(items) + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent=2):
    return _encode(obj, indent, 0) + ("\n" if indent is not None else "")


def loads(text):
    return json.loads(text)


def dump(obj, path, indent=2):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj, indent=indent))


def load(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
