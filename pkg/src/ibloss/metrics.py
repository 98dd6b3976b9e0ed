"""Accuracy metrics and the per-sample IB-factor influence report."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ibloss._io import atomic_write_text
from ibloss.data import Dataset
from ibloss.errors import ValidationError
from ibloss.model import MLPParams, forward, last_layer_grad_l1


@dataclass
class Metrics:
    overall: float
    per_class: np.ndarray  # NaN for classes absent from the test set
    top_k: float
    k: int
    confusion: np.ndarray  # rows: true class, columns: predicted class

    @property
    def balanced(self) -> float:
        return float(np.nanmean(self.per_class))

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall,
            "balanced_accuracy": self.balanced,
            "top_k": self.k,
            "top_k_accuracy": self.top_k,
            "per_class_accuracy": [None if np.isnan(a) else float(a) for a in self.per_class],
            "class_support": self.confusion.sum(axis=1).astype(int).tolist(),
            "confusion": self.confusion.astype(int).tolist(),
        }

    def per_class_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "support", "correct", "accuracy"])
        for k, row in enumerate(self.confusion):
            acc = self.per_class[k]
            w.writerow([k, int(row.sum()), int(row[k]), "" if np.isnan(acc) else repr(float(acc))])
        return buf.getvalue()

    def save(self, out_dir, prefix: str = "metrics"):
        out_dir = Path(out_dir)
        atomic_write_text(out_dir / f"{prefix}.json", json.dumps(self.to_dict(), indent=2) + "\n")
        atomic_write_text(out_dir / f"{prefix}_per_class.csv", self.per_class_csv())


def label_rank(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Position of the true label in a stable descending sort of the logits.

    Ties are ordered by class index, consistent with ``predict``.
    """
    z_true = logits[np.arange(len(labels)), labels][:, None]
    cols = np.arange(logits.shape[1])[None, :]
    ahead = (logits > z_true) | ((logits == z_true) & (cols < labels[:, None]))
    return ahead.sum(axis=1)


def evaluate(model: MLPParams, test_ds: Dataset, k_for_topk: int = 1) -> Metrics:
    K = model.n_classes
    if len(test_ds) == 0:
        raise ValidationError("test set is empty")
    if test_ds.labels.max() >= K:
        raise ValidationError(f"test label {int(test_ds.labels.max())} outside the model's {K} classes")
    if not 1 <= k_for_topk <= K:
        raise ValidationError(f"k_for_topk must lie in [1, {K}], got {k_for_topk}")
    logits = forward(model, test_ds.features).logits
    pred = np.argmax(logits, axis=1)
    y = test_ds.labels
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    support = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(support > 0, np.diag(confusion) / support, np.nan)
    overall = float(np.trace(confusion) / confusion.sum())
    top_k = float(np.mean(label_rank(logits, y) < k_for_topk))
    return Metrics(overall, per_class.astype(np.float64), top_k, int(k_for_topk), confusion)


@dataclass
class InfluenceReport:
    raw: np.ndarray
    normalized: np.ndarray
    labels: np.ndarray
    top: dict[int, np.ndarray]  # class -> sample indices, highest factor first
    class_mean_raw: np.ndarray
    class_mean_normalized: np.ndarray
    top_m: int

    def samples_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "label", "ib_factor", "normalized"])
        for i, (y, r, s) in enumerate(zip(self.labels, self.raw, self.normalized)):
            w.writerow([i, int(y), repr(float(r)), repr(float(s))])
        return buf.getvalue()

    def top_csv(self) -> str:
        """Rank-by-class table of the top-m normalized factors, one row per rank."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        classes = sorted(self.top)
        w.writerow(["rank"] + [f"class{k}" for k in classes])
        for r in range(self.top_m):
            w.writerow([r] + [repr(float(self.normalized[self.top[k][r]])) for k in classes])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "top_m": self.top_m,
            "n_samples": int(self.raw.size),
            "class_counts": np.bincount(self.labels, minlength=len(self.top)).tolist(),
            "class_mean_ib_factor": self.class_mean_raw.tolist(),
            "class_mean_normalized": self.class_mean_normalized.tolist(),
            "class_top_m_mean_normalized": [
                float(self.normalized[self.top[k]].mean()) for k in sorted(self.top)
            ],
            "top_indices": {str(k): self.top[k].tolist() for k in sorted(self.top)},
        }


def minmax_scale(values) -> np.ndarray:
    """Scale to [0, 1] with one global min/max; a constant input maps to all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def top_indices(values, idx, m: int) -> np.ndarray:
    """The ``m`` entries of ``idx`` with the largest values; ties go to the lower index."""
    values = np.asarray(values)
    idx = np.asarray(idx)
    order = np.lexsort((idx, -values[idx]))
    return idx[order[:m]]


def report_from_factors(raw, labels, n_classes: int, top_m: int) -> InfluenceReport:
    raw = np.asarray(raw, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)
    if top_m < 1 or top_m > counts.min():
        raise ValidationError(f"top_m={top_m} exceeds the smallest class count {int(counts.min())}")
    normalized = minmax_scale(raw)
    top = {k: top_indices(raw, np.flatnonzero(labels == k), top_m) for k in range(n_classes)}
    mean_raw = np.array([raw[labels == k].mean() for k in range(n_classes)])
    mean_norm = np.array([normalized[labels == k].mean() for k in range(n_classes)])
    return InfluenceReport(raw, normalized, labels, top, mean_raw, mean_norm, int(top_m))


def influence_report(model: MLPParams, ds: Dataset, top_m: int) -> InfluenceReport:
    """IB factor ||f - y||_1 * ||h||_1 of every sample, scaled and ranked per class."""
    trace = forward(model, ds.features)
    raw = last_layer_grad_l1(trace, ds.labels)
    return report_from_factors(raw, ds.labels, model.n_classes, top_m)
