"""Small shared helpers: the package-wide quantile rule and stable file output."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def empirical_quantile(values, q):
    """Empirical quantile with linear interpolation between order statistics.

    This is the single quantile convention used everywhere (threshold
    selection, return-level tables), so that all modules agree on the rule.
    Accepts a scalar or a sequence of probability levels.
    """
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("empty input")
    return np.quantile(arr, q)


def sha256_of_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dump_json(obj, path) -> None:
    """Write JSON with sorted keys and a trailing newline; byte-stable for equal input."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


def format_float(x: float) -> str:
    """Shortest round-trip decimal form; keeps CSV artifacts byte-stable."""
    return repr(float(x))
