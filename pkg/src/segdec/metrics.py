"""Confusion-matrix metrics and the ablation-table text rendering."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dataset import CLASS_NAMES, CURB, LANES, ROAD

REPORTED = (LANES, CURB, ROAD)  # column order of the table


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, num_classes: int = 4) -> np.ndarray:
    """counts[true, predicted]"""
    gt = np.asarray(gt).ravel().astype(np.int64)
    pred = np.asarray(pred).ravel().astype(np.int64)
    if gt.shape != pred.shape:
        raise ValueError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class MetricsTable:
    """Per-class accuracy (recall, TP/(TP+FN)) and IoU (TP/(TP+FP+FN)).

    A class absent from both prediction and ground truth gets NaN and drops
    out of every mean. ``mean`` is the value shown in the Mean column when
    set explicitly; otherwise ``mean_iou_3`` is shown.
    """

    accuracy: dict[str, float]
    iou: dict[str, float]
    confusion: np.ndarray | None = None
    mean: float | None = None
    names: tuple[str, ...] = field(default=CLASS_NAMES)

    @classmethod
    def from_confusion(cls, conf: np.ndarray, names: Sequence[str] = CLASS_NAMES) -> "MetricsTable":
        conf = np.asarray(conf, dtype=np.int64)
        tp = np.diag(conf)
        gt = conf.sum(axis=1)
        pr = conf.sum(axis=0)
        acc, iou = {}, {}
        for c, name in enumerate(names):
            union = gt[c] + pr[c] - tp[c]
            acc[name] = tp[c] / gt[c] if gt[c] else (math.nan if not pr[c] else 0.0)
            iou[name] = tp[c] / union if union else math.nan
        return cls({k: float(v) for k, v in acc.items()}, {k: float(v) for k, v in iou.items()}, conf,
                   names=tuple(names))

    @classmethod
    def from_values(cls, accuracy: Sequence[float], iou: Sequence[float], mean: float | None = None) -> "MetricsTable":
        """Build a row from (lanes, curb, road) values, e.g. published numbers."""
        keys = [CLASS_NAMES[c] for c in REPORTED]
        return cls(dict(zip(keys, map(float, accuracy))), dict(zip(keys, map(float, iou))), mean=mean)

    @classmethod
    def empty(cls) -> "MetricsTable":
        return cls.from_confusion(np.zeros((4, 4), np.int64))

    def _reported(self, d: dict[str, float]) -> list[float]:
        return [d.get(CLASS_NAMES[c], math.nan) for c in REPORTED]

    @property
    def mean_iou_3(self) -> float:
        return _nanmean(self._reported(self.iou))

    @property
    def mean_iou_4(self) -> float:
        return _nanmean(self.iou.values()) if len(self.iou) == 4 else math.nan

    @property
    def mean_acc_4(self) -> float:
        return _nanmean(self.accuracy.values()) if len(self.accuracy) == 4 else math.nan

    @property
    def mean_six(self) -> float:
        return _nanmean(self._reported(self.accuracy) + self._reported(self.iou))

    def candidate_means(self) -> dict[str, float]:
        return {"mean_iou_3": self.mean_iou_3, "mean_iou_4": self.mean_iou_4,
                "mean_acc_4": self.mean_acc_4, "mean_six": self.mean_six}

    @property
    def shown_mean(self) -> float:
        return self.mean if self.mean is not None else self.mean_iou_3

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "accuracy": {k: clean(v) for k, v in self.accuracy.items()},
            "iou": {k: clean(v) for k, v in self.iou.items()},
            "means": {k: clean(v) for k, v in self.candidate_means().items()},
            "mean": clean(self.shown_mean),
            "confusion": None if self.confusion is None else self.confusion.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate_predictions(preds: Sequence[np.ndarray], masks: Sequence[np.ndarray], num_classes: int = 4) -> MetricsTable:
    conf = np.zeros((num_classes, num_classes), np.int64)
    for p, m in zip(preds, masks, strict=True):
        conf += confusion_matrix(m, p, num_classes)
    names = CLASS_NAMES if num_classes == 4 else tuple(f"class{i}" for i in range(num_classes))
    return MetricsTable.from_confusion(conf, names)


def evaluate(graph, params, buffers, samples, batch_size: int = 8) -> MetricsTable:
    from .training import predict

    preds = predict(graph, params, buffers, samples, batch_size)
    return evaluate_predictions(preds, [s.mask for s in samples], output_channels(graph))


def output_channels(graph) -> int:
    for node in reversed(graph.nodes):
        if node.conv is not None:
            return node.conv.out_channels
    raise ValueError("graph has no convolution to read the class count from")


def _fmt(v: float) -> str:
    return f"{0.0 if math.isnan(v) else v:.4f}"


def render_table(rows: Sequence[tuple[str, MetricsTable]]) -> str:
    """Text table: Lanes/Curb/Road accuracy, Lanes/Curb/Road IoU, Mean (4 decimals).

    NaN (class absent everywhere) prints as 0.0000.
    """
    if not rows:
        raise ValueError("render_table needs at least one row")
    name_w = max(len("Decoder configuration"), *(len(n) for n, _ in rows))
    cols = ["Lanes", "Curb", "Road"] * 2 + ["Mean"]
    cell = 6
    group_w = 3 * cell + 2 * 2
    head1 = " " * name_w + "  " + "Avg. class accuracy".center(group_w) + "  " + "Avg. class IoU score".center(group_w)
    head2 = "Decoder configuration".ljust(name_w) + "  " + "  ".join(c.rjust(cell) for c in cols)
    lines = [head1.rstrip(), head2, "-" * len(head2)]
    for name, t in rows:
        vals = t._reported(t.accuracy) + t._reported(t.iou) + [t.shown_mean]
        lines.append(name.ljust(name_w) + "  " + "  ".join(_fmt(v).rjust(cell) for v in vals))
    return "\n".join(lines)
