"""Dice loss for training and overlap metrics for evaluation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .tensor_core import ShapeError, Tensor, _result

METRICS = ("dsc", "iou", "acc", "auc", "precision", "recall")
CLASS_METRICS = ("dsc", "iou", "precision", "recall")
REPORTED_CLASSES = ("benign", "malignant")


def dice_loss(pred: Tensor, target: Tensor | np.ndarray, smooth: float = 1.0) -> Tensor:
    """Soft dice loss, 1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s), averaged over the batch.

    Sums are taken per image in 64-bit; the loss itself is a 64-bit scalar.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ShapeError(f"dice_loss: prediction {pred.shape} and target {t.shape} differ")
    n = pred.shape[0]
    p64 = pred.data.reshape(n, -1).astype(np.float64)
    t64 = t.reshape(n, -1).astype(np.float64)
    inter = (p64 * t64).sum(axis=1)
    denom = p64.sum(axis=1) + t64.sum(axis=1) + smooth
    numer = 2.0 * inter + smooth
    loss = np.mean(1.0 - numer / denom)

    def back(g):
        scale = float(g.reshape(-1)[0]) / n
        dd = (2.0 * t64 * denom[:, None] - numer[:, None]) / (denom[:, None] ** 2)
        return [(-scale * dd).reshape(pred.shape).astype(pred.data.dtype)]

    return _result(np.asarray(loss).reshape(1, 1, 1, 1), [pred], "dice_loss", back)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _check_binary(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != bool:
        if not np.all((a == 0) | (a == 1)):
            raise ValueError(f"{what} must be binary (values in {{0, 1}})")
        a = a.astype(bool)
    return a


def confusion(pred_binary: np.ndarray, target: np.ndarray) -> ConfusionCounts:
    p = _check_binary(pred_binary, "prediction")
    t = _check_binary(target, "target")
    if p.shape != t.shape:
        raise ShapeError(f"confusion: prediction {p.shape} and target {t.shape} differ")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


# Degenerate denominators: when both masks are empty every overlap metric is 1.


def dsc(c: ConfusionCounts) -> float:
    d = 2 * c.tp + c.fp + c.fn
    return 1.0 if d == 0 else 2 * c.tp / d


def iou(c: ConfusionCounts) -> float:
    d = c.tp + c.fp + c.fn
    return 1.0 if d == 0 else c.tp / d


def acc(c: ConfusionCounts) -> float:
    return (c.tp + c.tn) / c.total


def precision(c: ConfusionCounts) -> float:
    d = c.tp + c.fp
    if d == 0:
        return 1.0 if c.fn == 0 else 0.0
    return c.tp / d


def recall(c: ConfusionCounts) -> float:
    d = c.tp + c.fn
    if d == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / d


def auc(pred_prob: np.ndarray, target: np.ndarray) -> float | None:
    """ROC AUC from the Mann-Whitney rank statistic with midranks.

    Returns None when the target has only one class.
    """
    s = np.asarray(pred_prob, dtype=np.float64).ravel()
    t = _check_binary(target, "target").ravel()
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s, method="average")
    u = ranks[t].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ImageMetrics:
    image_id: str
    cls: str
    fold: int
    dsc: float
    iou: float
    acc: float
    auc: float | None
    precision: float
    recall: float
    empty_pair: bool = False

    def value(self, metric: str) -> float | None:
        return getattr(self, metric)


def evaluate_image(
    prob: np.ndarray,
    target: np.ndarray,
    image_id: str = "",
    cls: str = "",
    fold: int = 0,
    threshold: float = 0.5,
) -> ImageMetrics:
    pred = np.asarray(prob) >= threshold
    c = confusion(pred, target)
    return ImageMetrics(
        image_id,
        cls,
        fold,
        dsc(c),
        iou(c),
        acc(c),
        auc(prob, target),
        precision(c),
        recall(c),
        empty_pair=(c.tp + c.fp + c.fn == 0),
    )


def _mean(values: Iterable[float | None]) -> float:
    vals = [v for v in values if v is not None and not (isinstance(v, float) and math.isnan(v))]
    return float(np.mean(vals)) if vals else float("nan")


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    vals = [v for v in values if not math.isnan(v)]
    if not vals:
        return float("nan"), float("nan")
    if len(vals) == 1:
        return vals[0], 0.0
    return float(np.mean(vals)), float(np.std(vals, ddof=1))


@dataclass
class MetricReport:
    """Per-image rows, per-fold means and the cross-fold mean +- sample std."""

    images: list[ImageMetrics]
    folds: dict[int, dict[str, float]]
    summary: dict[str, tuple[float, float]]
    per_class: dict[str, dict[str, tuple[float, float]]] = field(default_factory=dict)
    empty_pairs: int = 0

    def to_text(self, title: str = "CResU-Net") -> str:
        out = io.StringIO()
        header = ["fold"] + [m.upper() for m in METRICS] + ["n"]
        out.write("  ".join(f"{h:>14}" for h in header) + "\n")
        counts = {f: sum(1 for r in self.images if r.fold == f) for f in self.folds}
        for f in sorted(self.folds):
            cells = [f"{100 * self.folds[f][m]:14.2f}" for m in METRICS]
            out.write(f"{f:>14}  " + "  ".join(cells) + f"  {counts[f]:>14}\n")
        cells = [_pm(*self.summary[m]) for m in METRICS]
        out.write(f"{title:>14}  " + "  ".join(f"{c:>14}" for c in cells) + f"  {len(self.images):>14}\n")
        if self.per_class:
            out.write("\nper class (%)\n")
            out.write(f"{'class':>14}  " + "  ".join(f"{m.upper():>14}" for m in CLASS_METRICS) + "\n")
            for cls, row in self.per_class.items():
                out.write(f"{cls:>14}  " + "  ".join(f"{_pm(*row[m]):>14}" for m in CLASS_METRICS) + "\n")
        if self.empty_pairs:
            out.write(f"\nnote: {self.empty_pairs} image(s) with empty ground truth and empty prediction scored 1.0\n")
        return out.getvalue()

    def image_rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", "class", "fold", "dsc", "iou", "acc", "auc", "precision", "recall"])
        for r in self.images:
            w.writerow([r.image_id, r.cls, r.fold] + [_fmt(r.value(m)) for m in METRICS])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row"] + list(METRICS))
        for f in sorted(self.folds):
            w.writerow([f"fold{f}"] + [_fmt(self.folds[f][m]) for m in METRICS])
        w.writerow(["mean"] + [_fmt(self.summary[m][0]) for m in METRICS])
        w.writerow(["std"] + [_fmt(self.summary[m][1]) for m in METRICS])
        for cls, row in self.per_class.items():
            w.writerow([f"{cls}_mean"] + [_fmt(row[m][0]) if m in row else "" for m in METRICS])
            w.writerow([f"{cls}_std"] + [_fmt(row[m][1]) if m in row else "" for m in METRICS])
        return buf.getvalue()


def _pm(mean: float, std: float) -> str:
    if math.isnan(mean):
        return "-"
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def _fmt(v: float | None) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.6f}"


def aggregate(
    images: Sequence[ImageMetrics],
    fold_auc: dict[int, float] | None = None,
    classes: Sequence[str] = REPORTED_CLASSES,
) -> MetricReport:
    """Average per fold, then mean and sample standard deviation across folds.

    ``fold_auc`` overrides the per-fold AUC (pixel-pooled AUC mode).
    """
    if not images:
        raise ValueError("aggregate needs at least one image")
    folds: dict[int, dict[str, float]] = {}
    for f in sorted({r.fold for r in images}):
        rows = [r for r in images if r.fold == f]
        folds[f] = {m: _mean(r.value(m) for r in rows) for m in METRICS}
        if fold_auc is not None and f in fold_auc:
            folds[f]["auc"] = fold_auc[f]
    summary = {m: _mean_std([folds[f][m] for f in folds]) for m in METRICS}
    per_class = {}
    for cls in classes:
        rows = [r for r in images if r.cls == cls]
        if not rows:
            continue
        by_fold = {}
        for f in sorted({r.fold for r in rows}):
            fr = [r for r in rows if r.fold == f]
            by_fold[f] = {m: _mean(r.value(m) for r in fr) for m in CLASS_METRICS}
        per_class[cls] = {m: _mean_std([by_fold[f][m] for f in by_fold]) for m in CLASS_METRICS}
    return MetricReport(list(images), folds, summary, per_class, sum(r.empty_pair for r in images))
