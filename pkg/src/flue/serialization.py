"""JSON encoding of float arrays as exact decimal strings."""
from __future__ import annotations

import numpy as np


def float_to_str(value: float) -> str:
    # repr is the shortest string that parses back to the same double
    return repr(float(value))


def matrix_to_json(m) -> dict:
    m = np.atleast_2d(np.asarray(m, dtype=float))
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]),
            "entries": [float_to_str(v) for v in m.ravel()]}


def matrix_from_json(doc: dict) -> np.ndarray:
    entries = np.array([float(s) for s in doc["entries"]], dtype=float)
    return entries.reshape(int(doc["rows"]), int(doc["cols"]))


def vector_to_json(v) -> list:
    return [float_to_str(x) for x in np.ravel(np.asarray(v, dtype=float))]


def vector_from_json(items) -> np.ndarray:
    return np.array([float(s) for s in items], dtype=float)
