"""Binary classification metrics with cancer (label 1) as the positive class."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

POSITIVE = 1
REPORT_ROWS = ("F1_normal", "F1_cancer", "WF1", "BAC")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @classmethod
    def from_labels(cls, predictions, truths, positive: int = POSITIVE) -> "ConfusionCounts":
        p, t = _aligned(predictions, truths)
        pp, tp_ = p == positive, t == positive
        return cls(
            tp=int(np.sum(pp & tp_)),
            fp=int(np.sum(pp & ~tp_)),
            fn=int(np.sum(~pp & tp_)),
            tn=int(np.sum(~pp & ~tp_)),
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Rates:
    precision: float
    recall: float
    specificity: float
    degenerate: frozenset = frozenset()

    def __iter__(self):
        return iter((self.precision, self.recall, self.specificity))


def _aligned(predictions, truths) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions).astype(np.int64).ravel()
    t = np.asarray(truths).astype(np.int64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} truths")
    if p.size == 0:
        raise ValueError("empty inputs")
    return p, t


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, False) if den else (0.0, True)


def precision_recall_specificity(c: ConfusionCounts) -> Rates:
    """0/0 cases evaluate to 0 and are named in ``Rates.degenerate``."""
    precision, d1 = _ratio(c.tp, c.tp + c.fp)
    recall, d2 = _ratio(c.tp, c.tp + c.fn)
    specificity, d3 = _ratio(c.tn, c.tn + c.fp)
    flags = frozenset(n for n, d in zip(("precision", "recall", "specificity"), (d1, d2, d3)) if d)
    return Rates(precision, recall, specificity, flags)


def _f1(precision: float, recall: float) -> float:
    s = precision + recall
    return 2.0 * precision * recall / s if s > 0 else 0.0


def f1_score(predictions, truths, positive: int = POSITIVE) -> float:
    r = precision_recall_specificity(ConfusionCounts.from_labels(predictions, truths, positive))
    return _f1(r.precision, r.recall)


def f1_per_class(predictions, truths) -> tuple[float, float]:
    """(F1 with class 0 as positive, F1 with class 1 as positive)."""
    return f1_score(predictions, truths, 0), f1_score(predictions, truths, 1)


def weighted_f1_from_scores(f1s: Sequence[float], supports: Sequence[float]) -> float:
    supports = np.asarray(supports, dtype=np.float64)
    return float(np.dot(f1s, supports) / supports.sum())


def weighted_f1(predictions, truths) -> float:
    """Support-weighted mean of the two per-class F1 scores."""
    _, t = _aligned(predictions, truths)
    supports = [np.sum(t == 0), np.sum(t == 1)]
    return weighted_f1_from_scores(f1_per_class(predictions, truths), supports)


def balanced_accuracy(predictions, truths) -> float:
    r = precision_recall_specificity(ConfusionCounts.from_labels(predictions, truths))
    return (r.recall + r.specificity) / 2.0


@dataclass(frozen=True)
class SubjectScore:
    subject_id: str
    n_images: int
    n_correct: int

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_images

    @property
    def error_rate(self) -> float:
        return 1.0 - self.accuracy


def subject_level_accuracy(predictions, truths, subject_ids, known_subjects=None) -> dict[str, SubjectScore]:
    """Per-subject share of correctly labelled images.

    With ``known_subjects`` given, any other subject id raises ``KeyError``.
    """
    p, t = _aligned(predictions, truths)
    sids = [str(s) for s in subject_ids]
    if len(sids) != p.size:
        raise ValueError("subject_ids not aligned with predictions")
    if known_subjects is not None:
        known = {str(s) for s in known_subjects}
        unknown = sorted(set(sids) - known)
        if unknown:
            raise KeyError(f"unknown subject ids: {unknown}")
    out: dict[str, SubjectScore] = {}
    correct = p == t
    for sid in dict.fromkeys(sids):
        m = np.array([s == sid for s in sids])
        out[sid] = SubjectScore(sid, int(m.sum()), int(correct[m].sum()))
    return out


def score_row(predictions, truths) -> dict[str, float]:
    f0, f1 = f1_per_class(predictions, truths)
    return {
        "F1_normal": f0,
        "F1_cancer": f1,
        "WF1": weighted_f1(predictions, truths),
        "BAC": balanced_accuracy(predictions, truths),
    }


def model_columns(k: int) -> list[str]:
    return [f"Model{m}" for m in range(1, k + 1)] + ["MajorityVoting"]


def score_table(member_predictions: Sequence, voted, truths) -> dict[str, dict[str, float]]:
    """Column name -> metric row, laid out as Model1..Modelk + MajorityVoting."""
    cols = model_columns(len(member_predictions))
    rows = [score_row(p, truths) for p in member_predictions] + [score_row(voted, truths)]
    return dict(zip(cols, rows))


def write_table_csv(path, table: dict[str, dict], row_names: Sequence[str] | None = None, first_col: str = "metric") -> None:
    """Metrics as rows, models as columns."""
    cols = list(table)
    row_names = list(row_names) if row_names is not None else list(next(iter(table.values())))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([first_col] + cols)
        for r in row_names:
            w.writerow([r] + [_fmt(table[c].get(r, "")) for c in cols])


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
