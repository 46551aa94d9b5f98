"""Confusion matrices, IoU metrics and single-scale evaluation."""

import csv
import io
from dataclasses import dataclass

import numpy as np

from .dataio import IGNORE


class ConfusionMatrix:
    """K x K int64 counts; ``cm[t, p]`` counts pixels of truth ``t`` predicted ``p``."""

    def __init__(self, num_classes, ignore_index=IGNORE):
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, gt):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        k = self.num_classes
        if pred.size and (pred.min() < 0 or pred.max() >= k):
            raise ValueError(f"prediction outside [0, {k})")
        valid = gt != self.ignore_index
        t = gt[valid].astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= k):
            raise ValueError(f"ground-truth label outside [0, {k}) and not ignore")
        p = pred[valid].astype(np.int64)
        self.counts += np.bincount(t * k + p, minlength=k * k).reshape(k, k)

    def merge(self, other):
        self.counts += other.counts
        return self

    @property
    def total(self):
        return int(self.counts.sum())


def _counts(cm):
    return cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm, dtype=np.int64)


def miou(cm):
    """Per-class IoU (NaN where undefined) and their mean over defined classes."""
    c = _counts(cm)
    tp = np.diag(c).astype(np.float64)
    denom = c.sum(axis=0) + c.sum(axis=1) - np.diag(c)
    if not np.any(denom > 0):
        raise ValueError("IoU undefined: no class appears in ground truth or prediction")
    per_class = np.full(len(tp), np.nan)
    ok = denom > 0
    per_class[ok] = tp[ok] / denom[ok]
    return per_class, float(per_class[ok].mean())


def collapse(cm, class_to_category):
    """Sum rows and columns of ``cm`` within categories.

    Categories are renumbered densely in ascending id order.
    """
    c = _counts(cm)
    k = c.shape[0]
    missing = [i for i in range(k) if i not in class_to_category]
    if missing:
        raise ValueError(f"class {missing[0]} has no category")
    cats = sorted({class_to_category[i] for i in range(k)})
    index = {cat: j for j, cat in enumerate(cats)}
    m = np.zeros((k, len(cats)), dtype=np.int64)
    for i in range(k):
        m[i, index[class_to_category[i]]] = 1
    return m.T @ c @ m


def category_miou(cm, class_to_category):
    return miou(collapse(cm, class_to_category))[1]


def pixel_accuracy(cm):
    c = _counts(cm)
    total = c.sum()
    if total == 0:
        raise ValueError("pixel accuracy undefined on an empty confusion matrix")
    return float(np.trace(c) / total)


@dataclass
class Metrics:
    per_class: np.ndarray
    miou: float
    pixel_acc: float
    miou_cat: float = None
    counts: np.ndarray = None

    def to_text(self, class_names=None):
        lines = []
        for i, v in enumerate(self.per_class):
            name = f" {class_names[i]}" if class_names and i < len(class_names) else ""
            lines.append(f"class {i}{name} {_fmt(v)}")
        lines.append(f"mIoU {self.miou:.6f}")
        lines.append(f"mIoU_cat {_fmt(self.miou_cat)}")
        lines.append(f"pixel_acc {self.pixel_acc:.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "class", "value"])
        for i, v in enumerate(self.per_class):
            w.writerow(["iou", i, _fmt(v)])
        w.writerow(["miou", "", f"{self.miou:.6f}"])
        w.writerow(["miou_cat", "", _fmt(self.miou_cat)])
        w.writerow(["pixel_acc", "", f"{self.pixel_acc:.6f}"])
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return "n/a"
    return "nan" if np.isnan(v) else f"{v:.6f}"


def metrics_from_cm(cm, class_to_category=None):
    per_class, mean = miou(cm)
    cat = category_miou(cm, class_to_category) if class_to_category else None
    return Metrics(per_class, mean, pixel_accuracy(cm), cat, _counts(cm).copy())


def predict(model, image, means=None):
    """Argmax label map for one [3,H,W] image at native resolution.

    The mean-subtracted image is zero padded bottom/right to a multiple of 8
    and the prediction is cropped back.
    """
    _, h, w = image.shape
    x = np.asarray(image, dtype=np.float64)
    if means is not None:
        x = x - np.asarray(means, dtype=np.float64)[:, None, None]
    ph, pw = -(-h // 8) * 8, -(-w // 8) * 8
    padded = np.zeros((1, 3, ph, pw), dtype=model.dtype)
    padded[0, :, :h, :w] = x
    scores = model.forward(padded, train=False)
    return np.argmax(scores[0, :, :h, :w], axis=0).astype(np.int32)


def evaluate(model, samples, means=None, class_to_category=None, ignore_index=IGNORE):
    cm = ConfusionMatrix(model.cfg.num_classes, ignore_index)
    for s in samples:
        cm.accumulate(predict(model, s.image, means), s.labels)
    return metrics_from_cm(cm, class_to_category)
