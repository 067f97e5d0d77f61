"""Part-segmentation scores."""
from __future__ import annotations

import numpy as np

from .errors import DimensionError


def part_ious(pred, gt, part_count: int) -> np.ndarray:
    """Per-part IoU; parts absent from both prediction and truth get NaN."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction length {pred.shape} != ground truth length {gt.shape}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= part_count):
            raise DimensionError(f"{name} labels outside [0, {part_count})")
    inter = np.bincount(gt[pred == gt], minlength=part_count).astype(float)
    union = (
        np.bincount(pred, minlength=part_count) + np.bincount(gt, minlength=part_count) - inter
    ).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, np.nan)


def shape_miou(pred, gt, part_count: int, empty_union: str = "one") -> float:
    """Mean part IoU of one shape.

    ``empty_union="one"`` scores parts missing from both sides as 1.0;
    ``"skip"`` leaves them out of the mean.
    """
    ious = part_ious(pred, gt, part_count)
    if empty_union == "one":
        return float(np.nan_to_num(ious, nan=1.0).mean())
    if empty_union == "skip":
        present = ious[~np.isnan(ious)]
        return float(present.mean()) if present.size else 1.0
    raise ValueError(f"empty_union must be 'one' or 'skip', got {empty_union!r}")


def confusion(pred, gt, part_count: int) -> np.ndarray:
    """Counts indexed [truth, prediction]."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    return np.bincount(gt * part_count + pred, minlength=part_count**2).reshape(part_count, part_count)
