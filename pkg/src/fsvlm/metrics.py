"""Classification metrics: accuracy, macro-F1, one-vs-rest macro-AUC, ROC.

AUC uses the rank statistic (ties counted half), which equals the normalized
Mann-Whitney U and the trapezoidal area under the threshold-swept ROC curve.
Zero-division conventions: a class absent from both predictions and labels
contributes F1 = 0; classes without both a positive and a negative sample are
excluded from the AUC macro average.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass
class EvalResult:
    """One evaluation pass over a fixed validation set."""

    accuracy: float
    macro_f1: float
    macro_auc: float
    per_class_auc: dict[str, float]
    roc: dict[str, list[tuple[float, float]]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "macro_auc": self.macro_auc,
            "per_class_auc": self.per_class_auc,
            "roc": {c: [[float(f), float(t)] for f, t in pts] for c, pts in self.roc.items()},
        }

    @classmethod
    def from_json(cls, rec: dict) -> "EvalResult":
        return cls(
            accuracy=rec["accuracy"],
            macro_f1=rec["macro_f1"],
            macro_auc=rec["macro_auc"],
            per_class_auc=dict(rec["per_class_auc"]),
            roc={c: [(p[0], p[1]) for p in pts] for c, pts in rec.get("roc", {}).items()},
        )


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of exact matches."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError(f"preds/labels shape mismatch or empty: {preds.shape} vs {labels.shape}")
    return float(np.mean(preds == labels))


def macro_f1(preds: Sequence[int], labels: Sequence[int], n_classes: int) -> float:
    """Unweighted mean of per-class F1 over all ``n_classes`` classes.

    Precision/recall/F1 with zero denominators are taken as 0, so a class that
    never occurs contributes 0 to the mean.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("preds/labels shape mismatch or empty")
    f1s = []
    for c in range(n_classes):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        f1s.append(f1)
    return float(np.mean(f1s))


def binary_auc(scores: Sequence[float], labels01: Sequence[int]) -> float:
    """Rank-statistic ROC-AUC for one binary problem, ties counted half."""
    scores = np.asarray(scores, dtype=float)
    labels01 = np.asarray(labels01)
    n_pos = int(np.sum(labels01 == 1))
    n_neg = int(np.sum(labels01 == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("binary AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks for ties
    u = float(np.sum(ranks[labels01 == 1])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def macro_auc(probs: np.ndarray, labels: Sequence[int]) -> tuple[float, dict[int, float]]:
    """One-vs-rest AUC per class plus the unweighted macro average.

    Classes without both a positive and a negative sample are left out of the
    map and the mean. If only one class is present overall no class is
    scorable and a ValueError is raised.
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ValueError(f"probs must be NxC aligned with labels, got {probs.shape}")
    n, n_classes = probs.shape
    per_class: dict[int, float] = {}
    for c in range(n_classes):
        pos = (labels == c).astype(int)
        if pos.sum() == 0 or pos.sum() == n:
            continue
        per_class[c] = binary_auc(probs[:, c], pos)
    if not per_class:
        raise ValueError("macro AUC undefined: only one class present")
    return float(np.mean(list(per_class.values()))), per_class


def roc_points(scores: Sequence[float], labels01: Sequence[int]) -> list[tuple[float, float]]:
    """(FPR, TPR) points from a descending threshold sweep over unique scores,
    including the (0,0) and (1,1) endpoints."""
    scores = np.asarray(scores, dtype=float)
    labels01 = np.asarray(labels01)
    n_pos = int(np.sum(labels01 == 1))
    n_neg = int(np.sum(labels01 == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one positive and one negative")
    points = [(0.0, 0.0)]
    for t in np.unique(scores)[::-1]:
        predicted_pos = scores >= t
        tpr = float(np.sum(predicted_pos & (labels01 == 1))) / n_pos
        fpr = float(np.sum(predicted_pos & (labels01 == 0))) / n_neg
        if (fpr, tpr) != points[-1]:
            points.append((fpr, tpr))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return points


def evaluate_predictions(
    probs: np.ndarray, labels: Sequence[int], class_names: Sequence[str]
) -> EvalResult:
    """Bundle all metrics for one probability matrix."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    preds = np.argmax(probs, axis=1)
    macro, per_class_idx = macro_auc(probs, labels)
    per_class_auc = {class_names[c]: v for c, v in per_class_idx.items()}
    roc: dict[str, list[tuple[float, float]]] = {}
    for c in per_class_idx:
        roc[class_names[c]] = roc_points(probs[:, c], (labels == c).astype(int))
    return EvalResult(
        accuracy=accuracy(preds, labels),
        macro_f1=macro_f1(preds, labels, len(class_names)),
        macro_auc=macro,
        per_class_auc=per_class_auc,
        roc=roc,
    )


def export_roc(result: EvalResult, path: str | Path) -> None:
    """Line-delimited (class, fpr, tpr) records for external plotting."""
    lines = []
    for cls, pts in result.roc.items():
        for fpr, tpr in pts:
            lines.append(json.dumps({"class": cls, "fpr": fpr, "tpr": tpr}))
    Path(path).write_text("\n".join(lines) + "\n")
