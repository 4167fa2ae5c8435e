"""Small shared numeric helpers."""
from __future__ import annotations

import numpy as np

__all__ = ["log_sum_exp", "softmax_weights"]


def log_sum_exp(values: np.ndarray) -> float:
    """log(sum(exp(values))) with a max shift; -inf for an empty input."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("-inf")
    m = float(arr.max())
    return m + float(np.log(np.exp(arr - m).sum()))


def softmax_weights(values: np.ndarray) -> np.ndarray:
    """exp(values) renormalized to sum to one, computed with a max shift."""
    arr = np.asarray(values, dtype=np.float64)
    e = np.exp(arr - arr.max())
    return e / e.sum()
