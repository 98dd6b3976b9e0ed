"""Synthetic datasets, CSV I/O and the long-tailed / step imbalance transforms."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ibloss._io import atomic_write_text
from ibloss.errors import ValidationError
from ibloss.numerics import seeded_rng


@dataclass
class Dataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) int64
    n_classes: int | None = None
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValidationError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValidationError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape} labels"
            )
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValidationError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, name or self.name)


@dataclass
class GaussianMixtureSpec:
    means: np.ndarray  # (K, d)
    scale: float = 1.0
    n_per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        K = self.means.shape[0]
        if K < 2:
            raise ValidationError("need at least 2 class means")
        if len({tuple(m) for m in self.means.tolist()}) != K:
            raise ValidationError("class means must be distinct")
        if not self.scale > 0:
            raise ValidationError(f"scale must be > 0, got {self.scale}")
        if int(self.n_per_class) < 1:
            raise ValidationError(f"n_per_class must be >= 1, got {self.n_per_class}")

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]


@dataclass
class ImbalanceSpec:
    kind: str = "long_tailed"  # "long_tailed" | "step"
    rho: float = 100.0
    minority_classes: int | None = None  # step only
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("long_tailed", "step"):
            raise ValidationError(f"imbalance kind {self.kind!r} not in ('long_tailed', 'step')")
        if not self.rho > 1:
            raise ValidationError(f"imbalance ratio rho must be > 1, got {self.rho}")


def make_gaussian_mixture(spec: GaussianMixtureSpec) -> Dataset:
    """``n_per_class`` isotropic Gaussian samples around each class mean, class-major order."""
    rng = seeded_rng(spec.seed)
    K, d = spec.means.shape
    n = int(spec.n_per_class)
    noise = rng.standard_normal((K, n, d)) * spec.scale
    features = (spec.means[:, None, :] + noise).reshape(K * n, d)
    labels = np.repeat(np.arange(K), n)
    return Dataset(features, labels, K, name="gaussian_mixture")


def _subsample(ds: Dataset, target_counts, seed: int, name: str) -> Dataset:
    rng = seeded_rng(seed)
    keep = []
    for k, target in enumerate(target_counts):
        idx = np.flatnonzero(ds.labels == k)
        if target > idx.size:
            raise ValidationError(f"class {k}: need {target} samples, only {idx.size} available")
        keep.append(np.sort(rng.permutation(idx)[:target]))
    return ds.subset(np.sort(np.concatenate(keep)), name)


def _truncate(x: float) -> int:
    # floor, but exact products like 5000 * mu^9 == 100 - 1e-12 must stay 100
    return int(math.floor(x * (1 + 1e-9)))


def long_tail_counts(n_max: int, K: int, rho: float) -> list[int]:
    """floor(n_max * mu^k) with mu = rho^(-1/(K-1)), so the last class gets n_max/rho.

    Truncation matches the usual long-tailed CIFAR-10 counts
    (5000, 3237, 2096, 1357, 878, ... for rho = 50).
    """
    if not rho > 1:
        raise ValidationError(f"imbalance ratio rho must be > 1, got {rho}")
    if K < 2:
        raise ValidationError("long-tailed imbalance needs at least 2 classes")
    mu = rho ** (-1.0 / (K - 1))
    counts = [_truncate(n_max * mu ** k) for k in range(K)]
    for k, c in enumerate(counts):
        if c < 1:
            raise ValidationError(f"class {k} would keep 0 samples (n_max={n_max}, rho={rho})")
    return counts


def step_counts(n_max: int, K: int, rho: float, minority_classes: int) -> list[int]:
    if not rho > 1:
        raise ValidationError(f"imbalance ratio rho must be > 1, got {rho}")
    m = int(minority_classes)
    if not 1 <= m < K:
        raise ValidationError(f"minority_classes must lie in [1, {K}), got {m}")
    n_min = _truncate(n_max / rho)
    if n_min < 1:
        raise ValidationError(f"minority classes would keep 0 samples (n_max={n_max}, rho={rho})")
    return [n_max] * (K - m) + [n_min] * m


def apply_long_tail(ds: Dataset, rho: float, seed: int) -> Dataset:
    """Keep floor(n_max * mu^k) samples of class k; n_max is class 0's count."""
    counts = long_tail_counts(int(ds.class_counts[0]), ds.n_classes, rho)
    return _subsample(ds, counts, seed, f"{ds.name}_lt{rho:g}")


def apply_step(ds: Dataset, rho: float, minority_classes: int, seed: int) -> Dataset:
    """First K - m classes keep n_max, the last m keep floor(n_max / rho)."""
    counts = step_counts(int(ds.class_counts[0]), ds.n_classes, rho, minority_classes)
    return _subsample(ds, counts, seed, f"{ds.name}_step{rho:g}")


def apply_imbalance(ds: Dataset, spec: ImbalanceSpec) -> Dataset:
    if spec.kind == "step":
        if spec.minority_classes is None:
            raise ValidationError("step imbalance needs minority_classes")
        return apply_step(ds, spec.rho, spec.minority_classes, spec.seed)
    return apply_long_tail(ds, spec.rho, spec.seed)


def imbalance_ratio(ds_or_counts) -> float:
    counts = ds_or_counts.class_counts if isinstance(ds_or_counts, Dataset) else ds_or_counts
    counts = np.asarray(counts)
    if counts.size == 0 or counts.min() < 1:
        raise ValidationError(f"imbalance ratio undefined with an empty class: {counts.tolist()}")
    return float(counts.max() / counts.min())


def stratified_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Balanced test split: floor(min_k n_k * fraction) samples from every class."""
    if not 0 < test_fraction < 1:
        raise ValidationError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    counts = ds.class_counts
    per_class = int(math.floor(counts.min() * test_fraction + 1e-9))
    if per_class < 1:
        raise ValidationError(
            f"test_fraction {test_fraction} leaves no test sample for the smallest class ({counts.min()})"
        )
    rng = seeded_rng(seed)
    test_idx = []
    for k in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == k)
        test_idx.append(rng.permutation(idx)[:per_class])
    test_idx = np.sort(np.concatenate(test_idx))
    mask = np.ones(len(ds), dtype=bool)
    mask[test_idx] = False
    return ds.subset(np.flatnonzero(mask), f"{ds.name}_train"), ds.subset(test_idx, f"{ds.name}_test")


def dumps_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"f{j}" for j in range(ds.n_features)] + ["label"])
    for row, label in zip(ds.features, ds.labels):
        writer.writerow([repr(float(v)) for v in row] + [int(label)])
    return buf.getvalue()


def save_csv(ds: Dataset, path, meta: dict | None = None) -> Path:
    """Write ``path`` plus a ``<path>.meta.json`` sidecar with counts and ratio."""
    path = Path(path)
    atomic_write_text(path, dumps_csv(ds))
    counts = ds.class_counts.tolist()
    sidecar = {
        "name": ds.name,
        "n": len(ds),
        "n_features": ds.n_features,
        "n_classes": ds.n_classes,
        "class_counts": counts,
        "imbalance_ratio": imbalance_ratio(counts) if min(counts, default=0) >= 1 else None,
    }
    if meta:
        sidecar.update(meta)
    atomic_write_text(sidecar_path(path), json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Read ``f0,...,f{d-1},label`` rows; rejects non-finite values and label gaps."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"dataset not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1].strip() != "label":
            raise ValidationError(f"{path}:1: header must end with 'label'")
        d = len(header) - 1
        if [h.strip() for h in header[:-1]] != [f"f{j}" for j in range(d)]:
            raise ValidationError(f"{path}:1: feature columns must be named f0..f{d - 1}")
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise ValidationError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                values = [float(v) for v in row[:-1]]
                label = int(row[-1])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            if not all(math.isfinite(v) for v in values):
                raise ValidationError(f"{path}:{lineno}: non-finite feature value")
            if label < 0:
                raise ValidationError(f"{path}:{lineno}: negative label {label}")
            feats.append(values)
            labels.append(label)
    if not labels:
        raise ValidationError(f"{path}: no data rows")
    labels_arr = np.array(labels, dtype=np.int64)
    K = n_classes if n_classes is not None else int(labels_arr.max()) + 1
    present = set(np.unique(labels_arr).tolist())
    if n_classes is None and present != set(range(K)):
        missing = sorted(set(range(K)) - present)
        raise ValidationError(f"{path}: label set is not contiguous, missing {missing}")
    return Dataset(np.array(feats, dtype=np.float64).reshape(len(labels), d), labels_arr, K, path.stem)
