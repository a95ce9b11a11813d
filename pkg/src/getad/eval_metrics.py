"""Detection metrics for anomaly scores (higher score = more anomalous).

PR-AUC is computed as average precision: the sum over distinct descending
thresholds of precision times the recall gained at that threshold.  The
best F1 sweep predicts "anomalous" for scores strictly above a threshold
and tries every midpoint between consecutive distinct scores plus an
all-positive sentinel below the minimum.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np


@dataclass
class EvalResult:
    pr_auc: float
    best_f1: float
    best_threshold: float
    thresholds: np.ndarray
    precisions: np.ndarray
    recalls: np.ndarray
    n_pos: int
    n_neg: int


def _check_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and aligned")
    if len(scores) == 0:
        raise ValueError("empty evaluation set")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    if set(np.unique(labels)) - {0, 1}:
        raise ValueError("labels must be 0 (normal) or 1 (anomalous)")
    if labels.min() == labels.max():
        raise ValueError("evaluation set contains a single class")
    return scores, labels


def pr_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision/recall at every distinct score, descending.

    At threshold t the positive set is {score >= t}, so ties share one
    curve point.
    """
    scores, labels = _check_inputs(scores, labels)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1 - sorted_labels)
    distinct = np.nonzero(np.diff(sorted_scores, append=-np.inf))[0]
    thresholds = sorted_scores[distinct]
    precisions = tp[distinct] / (tp[distinct] + fp[distinct])
    recalls = tp[distinct] / tp[-1]
    return thresholds, precisions, recalls


def pr_auc(scores, labels) -> float:
    """Average precision: sum of precision * recall increment per threshold."""
    _, precisions, recalls = pr_curve(scores, labels)
    prev = np.concatenate([[0.0], recalls[:-1]])
    return float(np.sum((recalls - prev) * precisions))


def best_f1(scores, labels) -> tuple[float, float]:
    """(best F1, threshold achieving it); smallest threshold wins ties.

    Prediction rule: anomalous iff score > threshold.
    """
    scores, labels = _check_inputs(scores, labels)
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    distinct_mask = np.diff(sorted_scores, prepend=-np.inf) != 0
    distinct = sorted_scores[distinct_mask]
    candidates = [distinct[0] - 1.0]
    candidates.extend((distinct[:-1] + distinct[1:]) / 2.0)

    n_pos = int(sorted_labels.sum())
    best = (-1.0, 0.0)
    for threshold in candidates:
        predicted = sorted_scores > threshold
        tp = int(sorted_labels[predicted].sum())
        fp = int(predicted.sum()) - tp
        fn = n_pos - tp
        f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
        if f1 > best[0]:
            best = (f1, float(threshold))
    return best


def f1_at_threshold(scores, labels, threshold: float) -> float:
    """F1 for the fixed rule: anomalous iff score > threshold."""
    scores, labels = _check_inputs(scores, labels)
    predicted = scores > threshold
    tp = int(labels[predicted].sum())
    fp = int(predicted.sum()) - tp
    fn = int(labels.sum()) - tp
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def evaluate(scores, labels, threshold: float | None = None) -> EvalResult:
    """Full evaluation; a fixed threshold skips the F1 sweep."""
    scores, labels = _check_inputs(scores, labels)
    thresholds, precisions, recalls = pr_curve(scores, labels)
    auc = pr_auc(scores, labels)
    if threshold is None:
        f1, best_thr = best_f1(scores, labels)
    else:
        f1, best_thr = f1_at_threshold(scores, labels, threshold), float(threshold)
    return EvalResult(
        pr_auc=auc,
        best_f1=f1,
        best_threshold=best_thr,
        thresholds=thresholds,
        precisions=precisions,
        recalls=recalls,
        n_pos=int(labels.sum()),
        n_neg=int(len(labels) - labels.sum()),
    )


def report(result: EvalResult, scoring: str, metrics_path, curve_path=None) -> dict:
    """Write the metrics JSON (and optionally the PR-curve CSV)."""
    if len(result.thresholds) == 0:
        raise ValueError("empty precision/recall curve")
    summary = {
        "pr_auc": result.pr_auc,
        "f1": result.best_f1,
        "threshold": result.best_threshold,
        "n_pos": result.n_pos,
        "n_neg": result.n_neg,
        "scoring": scoring,
    }
    with open(metrics_path, "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    if curve_path is not None:
        with open(curve_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["threshold", "precision", "recall"])
            for t, p, r in zip(result.thresholds, result.precisions, result.recalls):
                writer.writerow([repr(float(t)), repr(float(p)), repr(float(r))])
    return summary
