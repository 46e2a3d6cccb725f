"""Pixel- and image-level detection metrics and their aggregation protocols."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .base import check_mask

METRIC_NAMES = ("iou", "precision", "recall", "f1")


@dataclass(frozen=True)
class PixelMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    iou: float
    precision: float
    recall: float
    f1: float

    @property
    def predicted_positive(self):
        return self.tp + self.fp


def _ratio(num, den):
    return num / den if den > 0 else 0.0


def pixel_metrics(pred, gt):
    """Confusion counts and scores for one image.

    Empty prediction against empty ground truth scores 1 everywhere; any
    other zero denominator scores 0.
    """
    p = check_mask(pred, name="prediction")
    g = check_mask(gt, name="ground truth")
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    if tp + fp + fn == 0:
        return PixelMetrics(tp, fp, fn, tn, 1.0, 1.0, 1.0, 1.0)
    return PixelMetrics(
        tp, fp, fn, tn,
        iou=tp / (tp + fp + fn),
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
        f1=2 * tp / (2 * tp + fp + fn),
    )


def any_positive(m):
    """Default "detected" rule: at least one predicted positive pixel."""
    return m.predicted_positive > 0


def _mean(rows):
    if not rows:
        return None
    return {k: float(np.mean([getattr(r, k) for r in rows])) for k in METRIC_NAMES}


@dataclass
class AggregateReport:
    n_images: int
    protocol_all: dict
    protocol_detected: dict | None
    n_detected: int
    correctly_detected: dict | None
    n_correct: int
    detected_rate: float
    image_level: dict | None = None
    per_image: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def table(self):
        """Plain-text table: Protocol-All / Protocol-Detected / correctly detected."""
        def row(name, vals, n):
            if vals is None:
                return f"{name:<22} {'n/a':>8} {'n/a':>9} {'n/a':>8} {'n/a':>8} {n:>6}"
            return (f"{name:<22} {vals['iou']:>8.4f} {vals['precision']:>9.4f} "
                    f"{vals['recall']:>8.4f} {vals['f1']:>8.4f} {n:>6}")

        lines = [f"{'Protocol':<22} {'IoU':>8} {'Precision':>9} {'Recall':>8} {'F1':>8} {'Images':>6}",
                 row("All", self.protocol_all, self.n_images),
                 row("Detected", self.protocol_detected, self.n_detected),
                 row("Correctly detected", self.correctly_detected, self.n_correct),
                 f"Detected rate (F1 > 0.5): {self.detected_rate:.3f}"]
        if self.image_level:
            il = self.image_level
            lines.append(f"Image level: TPR {il['tpr']:.4f}  FPR {il['fpr']:.4f}  F1 {il['f1']:.4f}")
        return "\n".join(lines)


def aggregate(per_image, detected_rule=any_positive, correct_threshold=0.5, names=None):
    """Average per-image metrics under the three protocols.

    Protocols whose subset is empty are reported as ``None`` rather than 0.
    """
    rows = list(per_image)
    if not rows:
        raise ValueError("aggregate needs at least one image")
    detected = [m for m in rows if detected_rule(m)]
    correct = [m for m in rows if m.f1 > correct_threshold]
    names = names if names is not None else [str(i) for i in range(len(rows))]
    return AggregateReport(
        n_images=len(rows),
        protocol_all=_mean(rows),
        protocol_detected=_mean(detected),
        n_detected=len(detected),
        correctly_detected=_mean(correct),
        n_correct=len(correct),
        detected_rate=len(correct) / len(rows),
        per_image=[{"name": n, **asdict(m)} for n, m in zip(names, rows)],
    )


def image_level_metrics(predictions, labels):
    """TPR, FPR and F1 of per-image forged/authentic decisions."""
    pred = np.asarray(predictions, dtype=bool)
    lab = np.asarray(labels, dtype=bool)
    if pred.shape != lab.shape:
        raise ValueError(f"{pred.size} predictions but {lab.size} labels")
    tp = int(np.sum(pred & lab))
    fp = int(np.sum(pred & ~lab))
    fn = int(np.sum(~pred & lab))
    tn = int(np.sum(~pred & ~lab))
    return {
        "tpr": _ratio(tp, tp + fn),
        "fpr": _ratio(fp, tn + fp),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
        "tp": tp, "fp": fp, "fn": fn, "tn": tn,
    }


def image_flag(mask, min_area=1):
    """An image is flagged forged when its mask has ``min_area`` positives."""
    return int(np.count_nonzero(check_mask(mask))) >= min_area
