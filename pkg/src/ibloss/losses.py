"""Per-sample losses and re-weighting rules.

Everything works on probabilities ``f`` (softmax outputs), integer labels
``y`` and, for the influence-balanced (IB) variants, the feature vector
``h`` that feeds the final linear layer. Functions accept one sample
(1-D ``f``) or a batch (2-D ``f``, one row per sample).

The IB weight of a sample is ``lambda_y / (||f - y||_1 * ||h||_1 + eps)``;
the product of norms is the L1 norm of the final-layer weight gradient
``(f - y) h^T`` of cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ibloss.errors import ValidationError
from ibloss.numerics import NORM_MODES, norm, one_hot

LOSS_KINDS = ("ce", "focal", "cb", "ib", "ib_focal", "ib_cb")
IB_KINDS = ("ib", "ib_focal", "ib_cb")
# "none" drops the influence factor: the denominator is epsilon alone.
FACTOR_NORMS = NORM_MODES + ("none",)
CE_CLAMP = 1e-12


@dataclass
class LossSpec:
    kind: str = "ce"
    gamma: float = 0.0
    beta: float = 0.0
    alpha: float | None = None  # None -> number of classes
    epsilon: float = 1e-3
    norm: str = "L1"
    renormalize: bool = False  # rescale IB weights to mean one per batch

    def __post_init__(self):
        self.kind = str(self.kind).lower()
        if self.kind not in LOSS_KINDS:
            raise ValidationError(f"loss kind {self.kind!r} not in {LOSS_KINDS}")
        if self.gamma < 0:
            raise ValidationError(f"gamma must be >= 0, got {self.gamma}")
        if not 0 <= self.beta < 1:
            raise ValidationError(f"beta must lie in [0, 1), got {self.beta}")
        if self.alpha is not None and not self.alpha > 0:
            raise ValidationError(f"alpha must be > 0, got {self.alpha}")
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be > 0, got {self.epsilon}")
        if self.norm not in FACTOR_NORMS:
            raise ValidationError(f"norm {self.norm!r} not in {FACTOR_NORMS}")

    @property
    def is_ib(self) -> bool:
        return self.kind in IB_KINDS

    @property
    def uses_focal(self) -> bool:
        return self.kind in ("focal", "ib_focal")


@dataclass
class ClassWeights:
    lam: np.ndarray
    alpha: float
    counts: np.ndarray = field(repr=False)


def _label_index(f: np.ndarray, y):
    y = np.asarray(y)
    K = f.shape[-1]
    if y.size and (y.min() < 0 or y.max() >= K):
        raise ValidationError(f"label out of range for K={K}")
    if f.ndim == 1:
        return f[int(y)]
    if y.shape != (f.shape[0],):
        raise ValidationError(f"{f.shape[0]} probability rows but labels shape {y.shape}")
    return f[np.arange(f.shape[0]), y.astype(np.int64)]


def cross_entropy(f, y):
    """-log f_y with f_y clamped below at 1e-12."""
    f = np.asarray(f, dtype=np.float64)
    return -np.log(np.maximum(_label_index(f, y), CE_CLAMP))


def focal(f, y, gamma: float):
    """(1 - f_y)^gamma * cross_entropy(f, y)."""
    if gamma < 0:
        raise ValidationError(f"gamma must be >= 0, got {gamma}")
    f = np.asarray(f, dtype=np.float64)
    p = _label_index(f, y)
    return (1.0 - p) ** gamma * -np.log(np.maximum(p, CE_CLAMP))


def cb_weights(counts, beta: float) -> np.ndarray:
    """Class-balanced weights (1 - beta) / (1 - beta^n_k), rescaled to sum to K."""
    counts = np.asarray(counts, dtype=np.float64)
    if not 0 <= beta < 1:
        raise ValidationError(f"beta must lie in [0, 1), got {beta}")
    if counts.ndim != 1 or counts.size == 0 or np.any(counts < 1):
        raise ValidationError(f"class counts must all be >= 1, got {counts}")
    w = (1.0 - beta) / (1.0 - np.power(beta, counts))
    return w * (counts.size / w.sum())


def lambda_weights(counts, alpha: float) -> ClassWeights:
    """Inverse-frequency class weights normalised so they sum to ``alpha``."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0 or np.any(counts < 1):
        raise ValidationError(f"class counts must all be >= 1, got {counts}")
    if not alpha > 0:
        raise ValidationError(f"alpha must be > 0, got {alpha}")
    # alpha / (n_k * sum 1/n) rounds once less than alpha * (1/n_k) / sum
    return ClassWeights(alpha / (counts * np.sum(1.0 / counts)), float(alpha), counts)


def ib_factor(f, y_onehot, h, mode: str = "L1"):
    """Norm of the final-layer gradient (f - y) h^T in factored form.

    L1 and L-infinity factor exactly over the outer product; L2 is the
    Frobenius norm, ||f - y||_2 * ||h||_2. ``mode="none"`` returns 0.
    """
    f = np.asarray(f, dtype=np.float64)
    y_onehot = np.asarray(y_onehot, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if f.shape != y_onehot.shape:
        raise ValidationError(f"f shape {f.shape} != y shape {y_onehot.shape}")
    if mode == "none":
        return np.zeros(f.shape[:-1]) if f.ndim > 1 else 0.0
    return norm(f - y_onehot, mode, axis=-1) * norm(h, mode, axis=-1)


def ib_loss(f, y, h, lambda_k: float, epsilon: float = 1e-3):
    """Return ``(loss, weight)`` for one sample under the IB rule."""
    if not lambda_k > 0 or not epsilon > 0:
        raise ValidationError("lambda_k and epsilon must be > 0")
    f = np.asarray(f, dtype=np.float64)
    factor = ib_factor(f, one_hot(y, f.shape[-1]), h)
    weight = lambda_k / (factor + epsilon)
    return weight * cross_entropy(f, y), weight


def class_weight_vector(spec: LossSpec, counts) -> np.ndarray | None:
    """Per-class multiplier for ``spec``: lambda for IB, CB weights for CB kinds."""
    counts = np.asarray(counts, dtype=np.float64)
    if spec.kind in ("cb", "ib_cb"):
        return cb_weights(counts, spec.beta)
    if spec.kind in ("ib", "ib_focal"):
        alpha = spec.alpha if spec.alpha is not None else float(counts.size)
        return lambda_weights(counts, alpha).lam
    return None


def sample_terms(spec: LossSpec, class_weights, probs, labels, h):
    """Per-sample losses, weights and logit gradients for a batch.

    Weights are treated as constants when differentiating: the returned
    ``dlogits`` is ``weight * d(base loss)/d(logits)``, where the base loss is
    CE or focal. For unweighted kinds the weight is 1.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    K = probs.shape[1]
    if isinstance(class_weights, ClassWeights):
        class_weights = class_weights.lam
    y1 = one_hot(labels, K)
    resid = probs - y1
    p = probs[np.arange(len(labels)), labels]
    ce = -np.log(np.maximum(p, CE_CLAMP))

    if spec.uses_focal:
        g = spec.gamma
        one_minus = 1.0 - p
        base = one_minus ** g * ce
        if g == 0:
            scale = np.ones_like(p)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                tail = np.where(one_minus > 0, g * p * one_minus ** (g - 1.0) * ce, 0.0)
            scale = one_minus ** g + tail
        dbase = resid * scale[:, None]
    else:
        base = ce
        dbase = resid

    if spec.kind in ("cb", "ib", "ib_focal", "ib_cb"):
        if class_weights is None:
            raise ValidationError(f"loss kind {spec.kind!r} needs class weights")
        cw = np.asarray(class_weights, dtype=np.float64)
        if cw.shape != (K,):
            raise ValidationError(f"class weights shape {cw.shape}, expected ({K},)")
        weights = cw[labels]
    else:
        weights = np.ones(len(labels))

    if spec.is_ib:
        weights = weights / (ib_factor(probs, y1, h, spec.norm) + spec.epsilon)
        if spec.renormalize:
            weights = weights / weights.mean()

    return weights * base, weights, dbase * weights[:, None]


def batch_loss(spec: LossSpec, class_weights, batch):
    """Mean loss and per-sample weights over a batch of ``(trace, y)`` pairs."""
    batch = list(batch)
    if not batch:
        raise ValidationError("empty batch")
    probs = np.stack([np.asarray(t.probs) for t, _ in batch])
    h = np.stack([np.asarray(t.h) for t, _ in batch])
    labels = np.array([int(y) for _, y in batch])
    losses, weights, _ = sample_terms(spec, class_weights, probs, labels, h)
    return float(losses.mean()), weights
