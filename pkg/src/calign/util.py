"""Small shared numeric helpers."""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    """Overflow-safe logistic function, float64."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def fmt(x) -> str:
    """Round-trip-exact decimal text for a float (used by CSV/JSON emitters)."""
    return repr(float(x))
