"""Loss functions."""
from __future__ import annotations

import numpy as np

from ..errors import AllMasked, LabelOutOfRange, ShapeMismatch
from .layers import log_softmax
from .tensor import Tensor


def cross_entropy(logits: Tensor, targets, ignore_mask=None) -> Tensor:
    """Mean negative log-likelihood of integer targets under the logits.

    logits: (..., C); targets: (...) integer class ids; ignore_mask: optional
    boolean (...) array, True positions are excluded from the mean. Raises
    AllMasked when nothing is left to average.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeMismatch(f"targets {targets.shape} vs logits {logits.shape}")
    c = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise LabelOutOfRange(f"targets outside [0, {c})")
    keep = np.ones(targets.shape, dtype=bool) if ignore_mask is None \
        else ~np.asarray(ignore_mask, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise AllMasked("all positions ignored")
    picked = log_softmax(logits, axis=-1).gather_last(targets)
    return -((picked * Tensor(keep.astype(np.float64))).sum()) * (1.0 / count)
