"""Segmentation scoring from pixel confusion matrices: per-class precision,
recall, F1, IoU, overall accuracy, and boundary-eroded ground truth."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .model import IGNORE


class ConfusionMatrix:
    """counts[i, j] = number of pixels with true class i predicted as j."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, truth: np.ndarray, pred: np.ndarray) -> "ConfusionMatrix":
        if truth.shape != pred.shape:
            raise ValueError(f"shape mismatch: truth {truth.shape} vs pred {pred.shape}")
        m = self.num_classes
        keep = truth != IGNORE
        t = truth[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= m or p.min() < 0 or p.max() >= m):
            raise ValueError(f"label outside 0..{m - 1}")
        self.counts += np.bincount(t * m + p, minlength=m * m).reshape(m, m)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out


def accumulate(cm: ConfusionMatrix, truth: np.ndarray, pred: np.ndarray) -> None:
    cm.accumulate(truth, pred)


def _ratio(num: np.ndarray, den: np.ndarray, empty: float) -> np.ndarray:
    num = num.astype(np.float64)
    den = den.astype(np.float64)
    out = np.full(num.shape, empty)
    np.divide(num, den, out=out, where=den > 0)
    return out


def f1_scores(cm: ConfusionMatrix):
    """Per-class (precision, recall, f1) arrays; zero denominators score 0."""
    c = cm.counts
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    precision = _ratio(tp, tp + fp, 0.0)
    recall = _ratio(tp, tp + fn, 0.0)
    f1 = _ratio(2 * precision * recall, precision + recall, 0.0)
    return precision, recall, f1


def iou_scores(cm: ConfusionMatrix) -> np.ndarray:
    """tp / (tp + fp + fn) per class; a class absent from both operands scores 1."""
    c = cm.counts
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    return _ratio(tp, union, 1.0)


def overall_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm.counts)) / total


def iou(truth: np.ndarray, pred: np.ndarray, cls: int) -> float:
    """Jaccard index of the class masks over supervised pixels."""
    if truth.shape != pred.shape:
        raise ValueError(f"shape mismatch: truth {truth.shape} vs pred {pred.shape}")
    keep = truth != IGNORE
    a = (truth == cls) & keep
    b = (pred == cls) & keep
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def disk_offsets(radius: int) -> list[tuple[int, int]]:
    r = int(radius)
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if dy * dy + dx * dx <= radius * radius and (dy or dx)]


def erode_boundary_gt(truth: np.ndarray, radius: float = 3) -> np.ndarray:
    """Mark IGNORE every pixel with a differently-labelled (non-IGNORE) pixel
    within Euclidean distance ``radius``."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    h, w = truth.shape
    boundary = np.zeros((h, w), dtype=bool)
    for dy, dx in disk_offsets(radius):
        # pixel (i, j) compares against (i + dy, j + dx) where in bounds
        i0, i1 = max(0, -dy), min(h, h - dy)
        j0, j1 = max(0, -dx), min(w, w - dx)
        if i0 >= i1 or j0 >= j1:
            continue
        here = truth[i0:i1, j0:j1]
        there = truth[i0 + dy:i1 + dy, j0 + dx:j1 + dx]
        boundary[i0:i1, j0:j1] |= (there != IGNORE) & (there != here)
    out = truth.copy()
    out[boundary] = IGNORE
    return out


@dataclass
class Report:
    class_names: list[str]
    cm: ConfusionMatrix
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    iou: np.ndarray
    mean_f1: float
    oa: float
    eroded: bool
    classes: list[int]
    per_tile: dict = field(default_factory=dict)

    @classmethod
    def from_cm(cls, cm, class_names, eroded=False, classes=None):
        classes = list(range(cm.num_classes)) if classes is None else list(classes)
        p, r, f1 = f1_scores(cm)
        return cls(
            class_names=list(class_names), cm=cm, precision=p, recall=r, f1=f1,
            iou=iou_scores(cm), mean_f1=float(f1[classes].mean()),
            oa=overall_accuracy(cm), eroded=eroded, classes=classes,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["scope", "class", "precision", "recall", "f1", "iou", "value"])
        rows = [("all", self)] + sorted(self.per_tile.items())
        for scope, rep in rows:
            for k, name in enumerate(rep.class_names):
                writer.writerow([scope, name, f"{rep.precision[k]:.6f}", f"{rep.recall[k]:.6f}",
                                 f"{rep.f1[k]:.6f}", f"{rep.iou[k]:.6f}", ""])
            writer.writerow([scope, "mean_f1", "", "", "", "", f"{rep.mean_f1:.6f}"])
            writer.writerow([scope, "overall_accuracy", "", "", "", "", f"{rep.oa:.6f}"])
            writer.writerow([scope, "pixels", "", "", "", "", rep.cm.total])
        writer.writerow(["all", "eroded", "", "", "", "", int(self.eroded)])
        return buf.getvalue()

    def to_table(self) -> str:
        width = max(len(n) for n in self.class_names + ["overall accuracy"])
        lines = [f"{'class':<{width}}  precision  recall      f1     iou"]
        for k, name in enumerate(self.class_names):
            lines.append(f"{name:<{width}}  {self.precision[k]:9.4f}  {self.recall[k]:6.4f}  "
                         f"{self.f1[k]:6.4f}  {self.iou[k]:6.4f}")
        lines.append(f"{'mean F1':<{width}}  {self.mean_f1:.4f}")
        lines.append(f"{'overall accuracy':<{width}}  {self.oa:.4f}")
        lines.append(f"{'eroded GT':<{width}}  {'yes' if self.eroded else 'no'}")
        lines.append(f"{'pixels':<{width}}  {self.cm.total}")
        return "\n".join(lines)


def evaluate_tiles(pairs, num_classes: int, eroded: bool = False, class_names=None,
                   classes=None, radius: float = 3) -> Report:
    """Score ``(name, truth, pred)`` or ``(truth, pred)`` tuples.

    ``num_classes`` counts label values; a one-channel sigmoid model labels
    {0, 1} and is scored with ``num_classes=2``.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no tiles to evaluate")
    names = class_names or [f"class_{k}" for k in range(num_classes)]
    total = ConfusionMatrix(num_classes)
    per_tile = {}
    for k, item in enumerate(pairs):
        name, truth, pred = item if len(item) == 3 else (f"tile_{k}", *item)
        if eroded:
            truth = erode_boundary_gt(truth, radius)
        cm = ConfusionMatrix(num_classes).accumulate(truth, pred)
        total = total + cm
        if cm.total:
            per_tile[name] = Report.from_cm(cm, names, eroded, classes)
    report = Report.from_cm(total, names, eroded, classes)
    report.per_tile = per_tile
    return report
