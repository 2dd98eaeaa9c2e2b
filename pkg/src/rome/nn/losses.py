"""Numpy softmax / cross-entropy on plain vectors."""
from __future__ import annotations

import warnings

import numpy as np

from .tensor import LOG_FLOOR


class SaturationWarning(RuntimeWarning):
    """The log argument hit the numerical floor."""


def softmax(v, axis=-1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(probs, label: int) -> float:
    """``-log(probs[label])`` with the argument floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} out of range for {probs.shape[-1]} classes")
    p = probs[label]
    if p < LOG_FLOOR:
        warnings.warn(f"cross-entropy saturated at -log({LOG_FLOOR})", SaturationWarning, stacklevel=2)
        p = LOG_FLOOR
    return float(-np.log(p))
