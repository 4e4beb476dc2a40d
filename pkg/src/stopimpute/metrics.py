"""Evaluation metrics for ordinal boarding-stop predictions.

All functions take ``y_true`` and ``y_pred`` as integer sequences (stop
sequence numbers or delta classes; the distance ``|p - a|`` is the same for
both). A ``nan`` prediction marks an answer that cannot be placed on the trip:
it is always wrong and is left out of RMSE.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class EvalPair:
    predicted: int
    actual: int

    @property
    def d(self) -> int:
        return abs(self.predicted - self.actual)


def _arrays(y_true, y_pred) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(y_true, dtype=float).ravel()
    p = np.asarray(y_pred, dtype=float).ravel()
    if a.shape != p.shape:
        raise ValueError(f"y_true and y_pred differ in length: {a.shape} vs {p.shape}")
    if len(a) == 0:
        raise ValueError("metrics need at least one pair")
    return a, p


def pairs_to_arrays(pairs: Sequence[EvalPair]) -> Tuple[np.ndarray, np.ndarray]:
    return (np.array([q.actual for q in pairs]), np.array([q.predicted for q in pairs]))


def abs_errors(y_true, y_pred) -> np.ndarray:
    a, p = _arrays(y_true, y_pred)
    d = np.abs(p - a)
    d[np.isnan(d)] = np.inf
    return d


def pareto_accuracy(y_true, y_pred, l: int) -> float:
    """Share of predictions within ``l`` stops of the actual one."""
    if l < 0:
        raise ValueError("l must be >= 0")
    return float(np.mean(abs_errors(y_true, y_pred) <= l))


def pareto_curve(y_true, y_pred, L: int) -> List[Tuple[int, float]]:
    d = abs_errors(y_true, y_pred)
    return [(l, float(np.mean(d <= l))) for l in range(L + 1)]


def accuracy(y_true, y_pred) -> float:
    a, p = _arrays(y_true, y_pred)
    return float(np.mean(a == p))


def rmse(y_true, y_pred) -> float:
    a, p = _arrays(y_true, y_pred)
    ok = ~np.isnan(p)
    if not ok.any():
        return float("nan")
    return float(np.sqrt(np.mean((p[ok] - a[ok]) ** 2)))


def classification_metrics(y_true, y_pred) -> Dict[str, float]:
    """Accuracy plus support-weighted recall, precision and F1.

    F1 is computed per class and then averaged with the same weights.
    """
    a, p = _arrays(y_true, y_pred)
    classes, support = np.unique(a, return_counts=True)
    correct = a == p
    tp = np.array([np.sum(correct & (a == c)) for c in classes], dtype=float)
    predicted = np.array([np.sum(p == c) for c in classes], dtype=float)
    recall = tp / support
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    w = support / support.sum()
    return {
        "accuracy": float(np.mean(correct)),
        # support-weighted recall sum_c (n_c / n) * (tp_c / n_c) reduces to sum(tp) / n
        "recall": float(tp.sum() / support.sum()),
        "precision": float(w @ precision),
        "f1": float(w @ f1),
    }


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """ROC AUC from ranks (ties get half credit)."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = positive.sum()
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s))
    # average rank within runs of equal scores
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    avg = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(avg, ends - starts)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_weighted_ovr(scores: np.ndarray, y_true, classes: Sequence) -> float:
    """Support-weighted one-vs-rest AUC over the score columns.

    Classes with no positive (or no negative) example are skipped and the
    weights renormalized.
    """
    scores = np.asarray(scores, dtype=float)
    a = np.asarray(y_true)
    total, weight = 0.0, 0
    for j, c in enumerate(classes):
        pos = a == c
        n_pos = int(pos.sum())
        if n_pos == 0 or n_pos == len(a):
            continue
        total += n_pos * binary_auc(scores[:, j], pos)
        weight += n_pos
    return total / weight if weight else float("nan")


def one_hot_scores(y_pred, classes: Sequence) -> np.ndarray:
    p = np.asarray(y_pred)
    return (p[:, None] == np.asarray(classes)[None, :]).astype(float)


@dataclass
class MetricsReport:
    n: int
    accuracy: float
    recall: float
    precision: float
    f1: float
    rmse: float
    pareto: Dict[int, float]
    auc: Optional[float] = None
    auc_degenerate: bool = False
    n_excluded: int = 0
    n_unplaceable: int = 0

    def pa(self, l: int) -> float:
        return self.pareto[l]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "n_excluded": self.n_excluded,
            "n_unplaceable": self.n_unplaceable,
            "accuracy": self.accuracy,
            "recall": self.recall,
            "precision": self.precision,
            "f1": self.f1,
            "auc": self.auc,
            "auc_degenerate": self.auc_degenerate,
            "rmse": self.rmse,
            "pareto": {f"PA_{l}": v for l, v in sorted(self.pareto.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(y_true, y_pred, scores: Optional[np.ndarray] = None, classes: Optional[Sequence] = None,
             max_l: int = 2) -> MetricsReport:
    """Full report. Pairs whose actual value is nan are excluded and counted.

    Without ``scores``, AUC is computed from one-hot predictions and flagged as
    degenerate.
    """
    a = np.asarray(y_true, dtype=float).ravel()
    p = np.asarray(y_pred, dtype=float).ravel()
    keep = ~np.isnan(a)
    n_excluded = int((~keep).sum())
    a, p = a[keep], p[keep]
    cm = classification_metrics(a, p)
    degenerate = scores is None
    if scores is None:
        classes = np.unique(np.concatenate([a, p[~np.isnan(p)]]))
        scores = one_hot_scores(p, classes)
    else:
        scores = np.asarray(scores)[keep]
    return MetricsReport(
        n=int(len(a)),
        accuracy=cm["accuracy"],
        recall=cm["recall"],
        precision=cm["precision"],
        f1=cm["f1"],
        rmse=rmse(a, p),
        pareto=dict(pareto_curve(a, p, max_l)),
        auc=auc_weighted_ovr(scores, a, classes),
        auc_degenerate=degenerate,
        n_excluded=n_excluded,
        n_unplaceable=int(np.isnan(p).sum()),
    )


def write_pareto_csv(path: str, curve: Sequence[Tuple[int, float]]) -> None:
    with open(path, "w") as fh:
        fh.write("l,PA_l\n")
        for l, v in curve:
            fh.write(f"{l},{v!r}\n")
