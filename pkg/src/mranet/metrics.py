"""Classification metrics computed from a confusion matrix or score rows.

Rates are one-vs-rest per class and macro-averaged (unweighted).  Ratios with
a zero denominator are defined as 0.  AUC is the Mann-Whitney rank statistic
with ties counted one half.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("precision", "sensitivity", "specificity", "accuracy", "mcc", "f1", "kappa", "auc_roc")


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def k(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path, class_names: Sequence[str] | None = None) -> None:
        names = list(class_names) if class_names is not None else [str(i) for i in range(self.k)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(names)
            writer.writerows(self.counts.tolist())


@dataclass
class MetricsReport:
    precision: float
    sensitivity: float
    specificity: float
    accuracy: float
    mcc: float
    f1: float
    kappa: float
    auc_roc: float
    per_class: dict[str, np.ndarray] = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in METRIC_NAMES}

    def to_text(self, class_names: Sequence[str] | None = None) -> str:
        lines = [f"{name}: {value:.6f}" for name, value in self.as_dict().items()]
        names = list(class_names) if class_names is not None else None
        for metric in ("precision", "sensitivity", "specificity", "f1"):
            for i, value in enumerate(self.per_class.get(metric, ())):
                label = names[i] if names else str(i)
                lines.append(f"{metric}[{label}]: {value:.6f}")
        return "\n".join(lines) + "\n"


def confusion_matrix(true_labels, pred_labels, k: int) -> ConfusionMatrix:
    y = np.asarray(true_labels)
    p = np.asarray(pred_labels)
    if y.shape != p.shape or y.ndim != 1:
        raise ValueError(f"label arrays must be 1-D and of equal length, got {y.shape} and {p.shape}")
    if y.size == 0:
        raise ValueError("confusion_matrix needs at least one sample")
    for name, arr in (("true", y), ("predicted", p)):
        bad = np.flatnonzero((arr < 0) | (arr >= k) | (arr != np.floor(arr)))
        if bad.size:
            raise ValueError(f"{name} label {arr[bad[0]]} at index {bad[0]} outside 0..{k - 1}")
    counts = np.bincount(y.astype(np.int64) * k + p.astype(np.int64), minlength=k * k).reshape(k, k)
    return ConfusionMatrix(counts)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den != 0)


def rate_metrics(cm: ConfusionMatrix) -> dict:
    """Per-class and macro precision, sensitivity, specificity, F1, and accuracy."""
    c = cm.counts.astype(np.float64)
    total = c.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    tn = total - tp - fp - fn
    precision = _ratio(tp, tp + fp)
    sensitivity = _ratio(tp, tp + fn)
    specificity = _ratio(tn, tn + fp)
    f1 = _ratio(2 * precision * sensitivity, precision + sensitivity)
    per_class = {"precision": precision, "sensitivity": sensitivity, "specificity": specificity, "f1": f1}
    out = {name: float(values.mean()) for name, values in per_class.items()}
    out["accuracy"] = float(tp.sum() / total)
    out["per_class"] = per_class
    return out


def mcc(cm: ConfusionMatrix) -> float:
    """Multiclass Matthews correlation (covariance form); 0 if a denominator factor is 0."""
    c = cm.counts.astype(np.float64)
    s = c.sum()
    if s <= 0:
        raise ValueError("confusion matrix is empty")
    correct = np.trace(c)
    t = c.sum(axis=1)
    p = c.sum(axis=0)
    num = correct * s - t @ p
    den_p = s * s - p @ p
    den_t = s * s - t @ t
    if den_p == 0 or den_t == 0:
        return 0.0
    return float(num / np.sqrt(den_p * den_t))


def cohen_kappa(cm: ConfusionMatrix) -> float:
    c = cm.counts.astype(np.float64)
    s = c.sum()
    if s <= 0:
        raise ValueError("confusion matrix is empty")
    po = np.trace(c) / s
    pe = float((c.sum(axis=0) @ c.sum(axis=1)) / (s * s))
    if pe == 1.0:
        return 0.0
    return float((po - pe) / (1.0 - pe))


def binary_auc(positive_scores, negative_scores) -> float:
    """P(score of a random positive > score of a random negative), ties counted 1/2."""
    pos = np.asarray(positive_scores, dtype=np.float64)
    neg = np.asarray(negative_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def auc_roc(true_labels, score_rows, k: int) -> float:
    """Macro one-vs-rest AUC; classes without positives or negatives are skipped.

    For ``k == 2`` this is the AUC of class 1's score.
    """
    y = np.asarray(true_labels)
    s = np.asarray(score_rows, dtype=np.float64)
    if s.ndim != 2 or s.shape != (y.size, k):
        raise ValueError(f"score rows must have shape ({y.size}, {k}), got {s.shape}")
    if np.unique(y).size < 2:
        raise ValueError("AUC is undefined when every label belongs to one class")
    classes = [1] if k == 2 else range(k)
    aucs = []
    for c in classes:
        pos = y == c
        if pos.all() or not pos.any():
            continue
        aucs.append(binary_auc(s[pos, c], s[~pos, c]))
    return float(np.mean(aucs))


def compute_report(true_labels, pred_labels, score_rows, k: int) -> tuple[MetricsReport, ConfusionMatrix]:
    cm = confusion_matrix(true_labels, pred_labels, k)
    rates = rate_metrics(cm)
    rep = MetricsReport(
        precision=rates["precision"],
        sensitivity=rates["sensitivity"],
        specificity=rates["specificity"],
        accuracy=rates["accuracy"],
        mcc=mcc(cm),
        f1=rates["f1"],
        kappa=cohen_kappa(cm),
        auc_roc=auc_roc(true_labels, score_rows, k),
        per_class=rates["per_class"],
    )
    return rep, cm


# ---------------------------------------------------------------------------
# Predictions files
# ---------------------------------------------------------------------------


@dataclass
class Predictions:
    paths: list[str]
    true_labels: np.ndarray
    pred_labels: np.ndarray
    scores: np.ndarray

    @property
    def k(self) -> int:
        return self.scores.shape[1]


def write_predictions(path, paths, true_labels, pred_labels, scores) -> None:
    scores = np.asarray(scores)
    k = scores.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "true_label", "pred_label"] + [f"score_{i}" for i in range(k)])
        for p, t, q, row in zip(paths, true_labels, pred_labels, scores):
            writer.writerow([p, int(t), int(q)] + [repr(float(v)) for v in row])


def read_predictions(path, k: int | None = None) -> Predictions:
    """Parse a predictions CSV; malformed rows raise ``ValueError`` with the line number."""
    paths, truths, preds, scores = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["path", "true_label", "pred_label"]:
            raise ValueError(f"{path}:1: header must start with path,true_label,pred_label")
        n_scores = len(header) - 3
        if header[3:] != [f"score_{i}" for i in range(n_scores)] or n_scores < 2:
            raise ValueError(f"{path}:1: expected score_0..score_{{K-1}} columns")
        if k is not None and n_scores != k:
            raise ValueError(f"{path}:1: file has {n_scores} score columns but k={k}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                t, q = int(row[1]), int(row[2])
                sc = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            if not (0 <= t < n_scores and 0 <= q < n_scores):
                raise ValueError(f"{path}:{lineno}: label outside 0..{n_scores - 1}")
            paths.append(row[0])
            truths.append(t)
            preds.append(q)
            scores.append(sc)
    if not paths:
        raise ValueError(f"{path}: no prediction rows")
    return Predictions(paths, np.array(truths), np.array(preds), np.array(scores, dtype=np.float64))


def report(predictions_file, k: int, out_dir=None, class_names: Sequence[str] | None = None):
    """Compute the metric battery for a predictions CSV.

    With ``out_dir`` set, ``metrics.txt`` and ``confusion.csv`` are written there.
    """
    preds = read_predictions(predictions_file, k)
    rep, cm = compute_report(preds.true_labels, preds.pred_labels, preds.scores, k)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.txt").write_text(rep.to_text(class_names))
        cm.to_csv(out_dir / "confusion.csv", class_names)
    return rep, cm
