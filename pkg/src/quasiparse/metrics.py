"""Pixel-level parsing metrics.

Per-label true positives, false positives, and false negatives are counted
pixel-wise and summed across all evaluated images before any ratio is formed
(micro-aggregation), so large and small images weigh by their pixel counts.
Precision, recall, and F1 are averaged over the foreground labels that
actually occur in the truth being evaluated; labels the truth never uses do
not dilute the averages. Any 0/0 ratio is defined as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError


@dataclass
class PixelCounts:
    """Raw confusion tallies; index 0 of the per-label arrays is unused."""

    num_labels: int
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    correct: int = 0
    total: int = 0
    fg_correct: int = 0
    fg_total: int = 0

    @classmethod
    def zeros(cls, num_labels: int) -> "PixelCounts":
        shape = num_labels + 1
        return cls(
            num_labels=num_labels,
            tp=np.zeros(shape, dtype=np.int64),
            fp=np.zeros(shape, dtype=np.int64),
            fn=np.zeros(shape, dtype=np.int64),
        )


def evaluate(pred: np.ndarray, truth: np.ndarray, num_labels: int) -> PixelCounts:
    """Count confusion statistics for one predicted label map against truth."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DataError(
            f"predicted map {pred.shape} does not match truth {truth.shape}"
        )
    if pred.max(initial=0) > num_labels or truth.max(initial=0) > num_labels:
        raise DataError(f"label id exceeds declared label count {num_labels}")
    counts = PixelCounts.zeros(num_labels)
    counts.total = pred.size
    counts.correct = int((pred == truth).sum())
    fg = truth != 0
    counts.fg_total = int(fg.sum())
    counts.fg_correct = int((pred[fg] == truth[fg]).sum())
    for label in range(1, num_labels + 1):
        p = pred == label
        t = truth == label
        counts.tp[label] = int((p & t).sum())
        counts.fp[label] = int((p & ~t).sum())
        counts.fn[label] = int((~p & t).sum())
    return counts


def merge_counts(parts: list[PixelCounts]) -> PixelCounts:
    """Sum tallies across images; ratios are only formed after this step."""
    if not parts:
        raise ConfigurationError("nothing to merge")
    num_labels = parts[0].num_labels
    out = PixelCounts.zeros(num_labels)
    for p in parts:
        if p.num_labels != num_labels:
            raise ConfigurationError("cannot merge counts with different label sets")
        out.tp += p.tp
        out.fp += p.fp
        out.fn += p.fn
        out.correct += p.correct
        out.total += p.total
        out.fg_correct += p.fg_correct
        out.fg_total += p.fg_total
    return out


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den else 0.0


@dataclass
class LabelScore:
    label: int
    name: str
    precision: float
    recall: float
    f1: float
    support: int  # truth pixels carrying this label


@dataclass
class MetricsReport:
    accuracy: float
    fg_accuracy: float
    avg_precision: float
    avg_recall: float
    avg_f1: float
    per_label: list[LabelScore]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "fg_accuracy": self.fg_accuracy,
            "avg_precision": self.avg_precision,
            "avg_recall": self.avg_recall,
            "avg_f1": self.avg_f1,
            "per_label": [
                {
                    "label": s.label,
                    "name": s.name,
                    "precision": s.precision,
                    "recall": s.recall,
                    "f1": s.f1,
                    "support": s.support,
                }
                for s in self.per_label
            ],
        }


def report(counts: PixelCounts, label_names: list[str]) -> MetricsReport:
    """Turn merged tallies into the summary report.

    Averages run over labels with truth support > 0. An empty evaluation
    (zero pixels) is an error rather than a row of zeros.
    """
    if counts.total == 0:
        raise DataError("evaluation covered zero pixels")
    if len(label_names) != counts.num_labels:
        raise ConfigurationError("label name count differs from metric label count")
    scores: list[LabelScore] = []
    for label in range(1, counts.num_labels + 1):
        tp, fp, fn = int(counts.tp[label]), int(counts.fp[label]), int(counts.fn[label])
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        f1 = _ratio(2 * precision * recall, precision + recall)
        scores.append(
            LabelScore(label, label_names[label - 1], precision, recall, f1, tp + fn)
        )
    present = [s for s in scores if s.support > 0]
    return MetricsReport(
        accuracy=_ratio(counts.correct, counts.total),
        fg_accuracy=_ratio(counts.fg_correct, counts.fg_total),
        avg_precision=_ratio(sum(s.precision for s in present), len(present)),
        avg_recall=_ratio(sum(s.recall for s in present), len(present)),
        avg_f1=_ratio(sum(s.f1 for s in present), len(present)),
        per_label=scores,
    )


def format_report(rep: MetricsReport) -> str:
    """Aligned text table: summary row plus one row per label."""
    lines = [
        f"{'accuracy':>14}  {'fg accuracy':>11}  {'avg precision':>13}  "
        f"{'avg recall':>10}  {'avg F1':>7}",
        f"{rep.accuracy * 100:>13.2f}%  {rep.fg_accuracy * 100:>10.2f}%  "
        f"{rep.avg_precision * 100:>12.2f}%  {rep.avg_recall * 100:>9.2f}%  "
        f"{rep.avg_f1 * 100:>6.2f}%",
        "",
        f"{'label':>12}  {'precision':>9}  {'recall':>7}  {'F1':>6}  {'support':>8}",
    ]
    for s in rep.per_label:
        lines.append(
            f"{s.name:>12}  {s.precision * 100:>8.2f}%  {s.recall * 100:>6.2f}%  "
            f"{s.f1 * 100:>5.2f}%  {s.support:>8d}"
        )
    return "\n".join(lines)
