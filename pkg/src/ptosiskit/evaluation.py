"""Confusion counts, percentage metrics, pair-counting ROC AUC, comparison tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(preds, truth) -> ConfusionMatrix:
    p = np.asarray(preds).astype(int).reshape(-1)
    t = np.asarray(truth).astype(int).reshape(-1)
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    if p.size == 0:
        raise ValueError("no samples")
    return ConfusionMatrix(
        tp=int(np.sum((p == 1) & (t == 1))),
        fp=int(np.sum((p == 1) & (t == 0))),
        fn=int(np.sum((p == 0) & (t == 1))),
        tn=int(np.sum((p == 0) & (t == 0))),
    )


def _pct(num: int, den: int) -> float | None:
    return 100.0 * num / den if den else None


def metrics(cm: ConfusionMatrix) -> dict[str, float | None]:
    """Accuracy, precision, recall and F1 as percentages.

    A ratio with a zero denominator is ``None`` rather than 0.
    """
    if cm.total <= 0:
        raise ValueError("empty confusion matrix")
    precision = _pct(cm.tp, cm.tp + cm.fp)
    recall = _pct(cm.tp, cm.tp + cm.fn)
    if precision is None or recall is None:
        f1 = None
    elif precision + recall == 0:
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    return {
        "accuracy": _pct(cm.tp + cm.tn, cm.total),
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }


def roc_auc(scores, truth) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie).

    Computed with midranks in O(n log n); the result is the exact pair
    count divided by P*N.
    """
    s = np.asarray(scores, dtype=float).reshape(-1)
    t = np.asarray(truth).astype(int).reshape(-1)
    if s.size != t.size:
        raise ValueError("scores and labels differ in length")
    n_pos = int(np.sum(t == 1))
    n_neg = int(np.sum(t == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: truth has a single class")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # doubled midranks keep everything integral
    ranks2 = np.empty(s.size, dtype=np.int64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks2[order[i : j + 1]] = i + j + 2
        i = j + 1
    # 2*U = sum of doubled positive ranks - n_pos (n_pos + 1)
    u2 = int(ranks2[t == 1].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


METRIC_COLUMNS = ("accuracy", "precision", "recall", "f1", "roc_auc")


def evaluate_method(preds, truth, scores=None) -> dict[str, float | None]:
    row = metrics(confusion(preds, truth))
    auc = None
    if scores is not None:
        try:
            auc = 100.0 * roc_auc(scores, truth)
        except ValueError:
            auc = None
    row["roc_auc"] = auc
    return row


def evaluate_methods(truth, outputs: Mapping[str, tuple[Sequence, Sequence | None]]) -> list[dict]:
    """One metric row per method.

    ``outputs`` maps method name to ``(predictions, scores or None)``; rows
    keep the mapping's order.
    """
    t = np.asarray(truth).reshape(-1)
    rows = []
    for name, (preds, scores) in outputs.items():
        if len(preds) != t.size or (scores is not None and len(scores) != t.size):
            raise ValueError(f"method {name!r} is not aligned with the truth labels")
        rows.append({"method": name, **evaluate_method(preds, t, scores)})
    return rows


def _cell(v) -> str:
    return "n/a" if v is None else f"{v:.1f}"


def table_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("method",) + METRIC_COLUMNS)
    for r in rows:
        writer.writerow([r["method"]] + [_cell(r.get(c)) for c in METRIC_COLUMNS])
    return buf.getvalue()


def table_text(rows: Sequence[Mapping]) -> str:
    header = ("method", "accuracy", "precision", "recall", "f1", "roc_auc")
    body = [[str(r["method"])] + [_cell(r.get(c)) for c in METRIC_COLUMNS] for r in rows]
    widths = [max(len(header[i]), *(len(b[i]) for b in body)) if body else len(header[i]) for i in range(len(header))]
    lines = ["  ".join(h.ljust(widths[0]) if i == 0 else h.rjust(widths[i]) for i, h in enumerate(header))]
    for b in body:
        lines.append("  ".join(c.ljust(widths[0]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(b)))
    return "\n".join(lines) + "\n"
