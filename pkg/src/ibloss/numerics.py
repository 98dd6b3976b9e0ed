"""Dense float64 helpers shared by every other module.

Matrices and vectors are plain ``numpy.ndarray`` objects of dtype float64
(C order, i.e. row-major). The functions here only add the shape and
finiteness checks the rest of the package relies on.
"""

from __future__ import annotations

from typing import Literal

import numpy as np

from ibloss.errors import ValidationError

NormMode = Literal["L1", "L2", "Linf"]
NORM_MODES = ("L1", "L2", "Linf")


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def as_vector(v, name: str = "vector") -> np.ndarray:
    arr = np.ascontiguousarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains NaN or Inf")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit shape report on mismatch."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValidationError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def stable_softmax(z) -> np.ndarray:
    """Softmax along the last axis, shifted by the max for overflow safety.

    Accepts a single logit vector or a batch (one row per sample).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValidationError("softmax of an empty vector")
    check_finite(z, "logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def norm(v, mode: NormMode = "L1", axis=None):
    """L1, L2 or L-infinity norm; ``axis`` is forwarded for batched use."""
    v = np.asarray(v, dtype=np.float64)
    a = np.abs(v)
    if mode == "L1":
        return a.sum(axis=axis)
    if mode == "L2":
        # scale by the max so tiny or huge entries don't under/overflow when squared
        if v.size == 0:
            return 0.0
        m = a.max(axis=axis, keepdims=axis is not None)
        safe = np.where(m > 0, m, 1.0)
        out = safe * np.sqrt(((a / safe) ** 2).sum(axis=axis, keepdims=axis is not None))
        out = np.where(m > 0, out, 0.0)
        return float(out) if axis is None else np.squeeze(out, axis=axis)
    if mode == "Linf":
        if v.size == 0:
            return 0.0
        return a.max(axis=axis)
    raise ValidationError(f"unknown norm mode {mode!r}; expected one of {NORM_MODES}")


def one_hot(label, K: int) -> np.ndarray:
    """One-hot vector (scalar label) or matrix (array of labels)."""
    labels = np.asarray(label)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValidationError(f"label {label} out of range for K={K}")
    out = np.zeros(labels.shape + (K,), dtype=np.float64)
    if labels.ndim == 0:
        out[int(labels)] = 1.0
    else:
        out[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    return out


def seeded_rng(seed: int, stream: int | None = None) -> np.random.Generator:
    """Deterministic generator: Philox (counter-based) under numpy's Generator.

    Normals use numpy's ziggurat sampler. ``stream`` derives an independent
    child generator from the same seed, e.g. one per epoch or per sweep
    cell; a generator must never be shared between threads.
    """
    entropy = [int(seed)] if stream is None else [int(seed), int(stream)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
