"""Confusion counts and the Dice / pixel-error / recall ratios derived from them.

Empty-denominator conventions: Dice is 1 when both masks are empty and
recall is 1 when the truth has no positives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    """1 where ``probs >= threshold``, else 0, as uint8."""
    return (np.asarray(probs) >= threshold).astype(np.uint8)


@dataclass(frozen=True)
class MetricsRecord:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def dice(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom

    @property
    def pixel_error(self) -> float:
        return 0.0 if self.total == 0 else (self.fp + self.fn) / self.total

    @property
    def recall(self) -> float:
        denom = self.tp + self.fn
        return 1.0 if denom == 0 else self.tp / denom

    def __add__(self, other: "MetricsRecord") -> "MetricsRecord":
        return MetricsRecord(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def _check_binary(name: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must be binary (values in {{0, 1}})")
    return arr.astype(bool)


def compute_metrics(pred, truth) -> MetricsRecord:
    p = _check_binary("prediction", pred)
    t = _check_binary("ground truth", truth)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth shape {t.shape}")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return MetricsRecord(tp, fp, p.size - tp - fp - fn, fn)


class MetricsAccumulator:
    """Collects per-slice records.

    ``micro`` sums confusion counts before taking ratios; ``macro`` averages
    the per-slice ratios.
    """

    def __init__(self, mode: str = "micro"):
        if mode not in ("micro", "macro"):
            raise ValueError(f"averaging mode must be 'micro' or 'macro', got {mode!r}")
        self.mode = mode
        self.records: list[MetricsRecord] = []

    def update(self, pred, truth) -> None:
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.ndim >= 3:
            for p, t in zip(pred.reshape(-1, *pred.shape[-2:]), truth.reshape(-1, *truth.shape[-2:])):
                self.records.append(compute_metrics(p, t))
        else:
            self.records.append(compute_metrics(pred, truth))

    @property
    def counts(self) -> MetricsRecord:
        total = MetricsRecord()
        for r in self.records:
            total = total + r
        return total

    def summary(self) -> dict[str, float]:
        if self.mode == "micro" or not self.records:
            c = self.counts
            return {"dice": c.dice, "pixel_error": c.pixel_error, "recall": c.recall}
        return {
            "dice": float(np.mean([r.dice for r in self.records])),
            "pixel_error": float(np.mean([r.pixel_error for r in self.records])),
            "recall": float(np.mean([r.recall for r in self.records])),
        }
