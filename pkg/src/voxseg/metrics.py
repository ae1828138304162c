"""Evaluation metrics."""

from __future__ import annotations

import numpy as np


def dice_metric(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """2|P n G| / (|P| + |G|); two empty sets score 1.0."""
    p = pred == cls
    g = gt == cls
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def foreground_dice(pred: np.ndarray, gt: np.ndarray,
                    num_classes: int) -> dict[int, float]:
    return {c: dice_metric(pred, gt, c) for c in range(1, num_classes + 1)}


def mean_foreground_dice(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    scores = foreground_dice(pred, gt, num_classes)
    return float(np.mean(list(scores.values())))
