"""Per-class confusion counts, precision/recall/F1 and support-weighted F1."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

UNDEFINED = "n/a"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ClassMetrics:
    class_name: str
    counts: ConfusionCounts
    precision: float | None
    recall: float | None
    f1: float | None

    @property
    def support(self) -> int:
        return self.counts.tp + self.counts.fn

    def to_dict(self) -> dict:
        c = self.counts
        return {
            "class": self.class_name,
            "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
        }


def tally(predictions: Mapping[str, set], truths: Mapping[str, set],
          classes: Sequence) -> dict:
    """Per-class confusion counts over records keyed by id."""
    if set(predictions) != set(truths):
        only_pred = sorted(set(predictions) - set(truths))
        only_truth = sorted(set(truths) - set(predictions))
        raise ValueError(
            f"record ids differ: predicted-only {only_pred[:10]}, truth-only {only_truth[:10]}"
        )
    out = {}
    for c in classes:
        tp = fp = fn = tn = 0
        for rid, pred in predictions.items():
            p, t = c in pred, c in truths[rid]
            if p and t:
                tp += 1
            elif p:
                fp += 1
            elif t:
                fn += 1
            else:
                tn += 1
        out[c] = ConfusionCounts(tp, fp, fn, tn)
    return out


def precision_recall_f1(counts: ConfusionCounts):
    """``(precision, recall, f1)``; any 0/0 ratio is ``None``."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    precision = tp / (tp + fp) if tp + fp else None
    recall = tp / (tp + fn) if tp + fn else None
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def class_metrics(counts_by_class: Mapping) -> list[ClassMetrics]:
    rows = []
    for c, counts in counts_by_class.items():
        name = getattr(c, "value", c)
        rows.append(ClassMetrics(str(name), counts, *precision_recall_f1(counts)))
    return rows


def weighted_f1(per_class: Sequence[ClassMetrics]) -> float:
    """Support-weighted mean of per-class F1; undefined F1 counts as 0."""
    total = sum(m.support for m in per_class)
    if total == 0:
        raise ValueError("no class has positive support")
    acc = 0.0
    for m in per_class:
        if m.support == 0:
            continue
        if m.f1 is None:
            warnings.warn(f"F1 undefined for class {m.class_name!r}; counted as 0",
                          RuntimeWarning, stacklevel=2)
            continue
        acc += m.f1 * m.support
    return acc / total


def _fmt(value):
    return UNDEFINED if value is None else f"{value:.2f}"


def render_table(per_class: Sequence[ClassMetrics], title="Caused By") -> str:
    width = max([len(title)] + [len(m.class_name) for m in per_class]) + 2
    lines = [f"{title:<{width}}{'TP':>5}{'FP':>5}{'FN':>5}{'Precision':>11}{'Recall':>8}{'F1':>7}"]
    for m in per_class:
        c = m.counts
        lines.append(f"{m.class_name:<{width}}{c.tp:>5}{c.fp:>5}{c.fn:>5}"
                     f"{_fmt(m.precision):>11}{_fmt(m.recall):>8}{_fmt(m.f1):>7}")
    try:
        lines.append(f"Weighted F1 Score: {weighted_f1(per_class):.2f}")
    except ValueError:
        lines.append(f"Weighted F1 Score: {UNDEFINED}")
    return "\n".join(lines) + "\n"


def report_json(per_class: Sequence[ClassMetrics]) -> str:
    try:
        wf1 = weighted_f1(per_class)
    except ValueError:
        wf1 = None
    payload = {"classes": [m.to_dict() for m in per_class], "weighted_f1": wf1}
    return json.dumps(payload, indent=2, ensure_ascii=False) + "\n"
