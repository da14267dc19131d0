"""Certainty score functions computed from logits."""
from __future__ import annotations

import numpy as np


def hinge_score(logits, y):
    """True-class logit minus the largest other logit.

    ``logits`` may be a single vector or a stack ``(..., K)``; ``y`` is the class
    index (a scalar, or an array broadcasting against the leading dimensions).
    """
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[-1]
    if k < 2:
        raise ValueError("hinge score needs at least two classes")
    y = np.asarray(y, dtype=np.int64)
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"class index out of range [0, {k})")
    if logits.ndim == 1:
        y = int(y)
        true = logits[y]
        return float(true - np.max(np.delete(logits, y)))
    y_b = np.broadcast_to(y, logits.shape[:-1])
    true = np.take_along_axis(logits, y_b[..., None], axis=-1)[..., 0]
    others = logits.copy()
    np.put_along_axis(others, y_b[..., None], -np.inf, axis=-1)
    return true - others.max(axis=-1)
