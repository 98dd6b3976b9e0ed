"""Exact influence on the final linear layer, plus a leave-one-out retraining oracle.

Both only make sense for small problems: the Hessian over the final-layer
weights is assembled densely, and the leave-one-out oracle refits a convex
linear softmax classifier with Newton's method for every removed sample.
Final-layer weights are flattened row-major, index ``k * L + l``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ibloss.data import Dataset
from ibloss.errors import NumericalError, ValidationError
from ibloss.model import MLPParams, forward
from ibloss.numerics import one_hot, stable_softmax

logger = logging.getLogger(__name__)

MAX_HESSIAN_PARAMS = 500


@dataclass
class ExactInfluence:
    hessian: np.ndarray  # (P, P), without damping
    gradients: np.ndarray  # (n, P) per-sample loss gradients
    influences: np.ndarray  # (n, P), -(H + damping I)^-1 grad
    damping: float
    min_eigenvalue: float  # of H + damping I

    @property
    def l1(self) -> np.ndarray:
        return np.abs(self.influences).sum(axis=1)

    def residual(self) -> float:
        """max |(H + dI) I(x) + grad(x)| over all samples and coordinates."""
        A = self.hessian + self.damping * np.eye(self.hessian.shape[0])
        return float(np.abs(self.influences @ A.T + self.gradients).max())


def last_layer_inputs(model: MLPParams, X) -> tuple[np.ndarray, np.ndarray]:
    """(probs, h) for every row of X."""
    trace = forward(model, np.atleast_2d(X))
    return trace.probs, trace.h


def softmax_ce_hessian(probs: np.ndarray, h: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """(1/n) sum_i mask_i (diag(f_i) - f_i f_i^T) kron (h_i h_i^T), n = number of rows."""
    n, K = probs.shape
    L = h.shape[1]
    w = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
    A = probs[:, :, None] * np.eye(K)[None] - probs[:, :, None] * probs[:, None, :]
    H = np.einsum("i,ijk,il,im->ijlkm", w, A, h, h).sum(axis=0)
    return H.reshape(K * L, K * L) / n


def softmax_ce_gradients(probs: np.ndarray, h: np.ndarray, labels) -> np.ndarray:
    """Row i is vec((f_i - y_i) h_i^T)."""
    resid = probs - one_hot(labels, probs.shape[1])
    return (resid[:, :, None] * h[:, None, :]).reshape(len(probs), -1)


def exact_influence(model: MLPParams, ds: Dataset, damping: float = 1e-4,
                    l2: float = 0.0) -> ExactInfluence:
    """Influence vectors -(H + damping I)^-1 grad L(x) over the final-layer weights.

    ``H`` is the mean per-sample cross-entropy Hessian, plus ``l2 * I`` when
    the model was fit with an L2 penalty. Raises NumericalError when the
    damped system is singular; retry with a larger ``damping``.
    """
    if damping < 0:
        raise ValidationError(f"damping must be >= 0, got {damping}")
    K, L = model.weights[-1].shape
    if K * L > MAX_HESSIAN_PARAMS:
        raise ValidationError(f"{K * L} final-layer parameters; dense Hessian limited to {MAX_HESSIAN_PARAMS}")
    probs, h = last_layer_inputs(model, ds.features)
    H = softmax_ce_hessian(probs, h) + l2 * np.eye(K * L)
    H = 0.5 * (H + H.T)
    G = softmax_ce_gradients(probs, h, ds.labels)
    A = H + damping * np.eye(K * L)
    eig = np.linalg.eigvalsh(A)
    scale = max(abs(eig[-1]), 1.0)
    if eig[0] <= 1e-14 * scale:
        raise NumericalError(
            f"Hessian + {damping:g} I is singular (min eigenvalue {eig[0]:.3g}); retry with larger damping"
        )
    logger.debug("exact influence: P=%d damping=%g min eig=%.3g", K * L, damping, eig[0])
    inf = -np.linalg.solve(A, G.T).T
    return ExactInfluence(H, G, inf, float(damping), float(eig[0]))


@dataclass
class ConvexSoftmaxSpec:
    """Linear softmax classifier without bias, fit full-batch by Newton's method.

    Minimises ``(1/n) sum_j L_j(W) + (l2 / 2) ||W||^2`` from ``W = 0``. A
    removed sample is dropped from the sum while ``n`` stays the full
    dataset size, i.e. the objective becomes ``R(W) - L_i(W) / n``. With
    ``l2 = 0`` the softmax shift direction is flat; Newton steps use a
    least-squares solve, which never moves along it.
    """

    l2: float = 1e-3
    tol: float = 1e-8
    max_iter: int = 100


def _objective(W, X, y1, mask, n, l2):
    z = X @ W.T
    zmax = z.max(axis=1, keepdims=True)
    logZ = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    return float(((logZ - (z * y1).sum(axis=1)) * mask).sum() / n + 0.5 * l2 * np.sum(W * W))


def fit_convex(spec: ConvexSoftmaxSpec, ds: Dataset, drop: int | None = None,
               W0: np.ndarray | None = None) -> np.ndarray:
    """Weight matrix (K, d) at which the gradient norm is below ``spec.tol``."""
    X = ds.features
    K, d = ds.n_classes, ds.n_features
    n = len(ds)
    y1 = one_hot(ds.labels, K)
    mask = np.ones(n)
    if drop is not None:
        mask[drop] = 0.0
    W = np.zeros((K, d)) if W0 is None else np.array(W0, dtype=np.float64)
    for _ in range(spec.max_iter):
        f = stable_softmax(X @ W.T)
        resid = (f - y1) * mask[:, None]
        g = (resid[:, :, None] * X[:, None, :]).sum(axis=0).ravel() / n + spec.l2 * W.ravel()
        if float(np.linalg.norm(g)) < spec.tol:
            return W
        H = softmax_ce_hessian(f, X, mask) + spec.l2 * np.eye(K * d)
        step = np.linalg.lstsq(H, -g, rcond=1e-13)[0].reshape(K, d)
        # backtracking keeps the iteration monotone far from the optimum
        f0 = _objective(W, X, y1, mask, n, spec.l2)
        slope = float(g @ step.ravel())
        t = 1.0
        while t > 1e-10 and _objective(W + t * step, X, y1, mask, n, spec.l2) > f0 + 1e-4 * t * slope:
            t *= 0.5
        W = W + t * step
    raise NumericalError(f"Newton fit did not reach gradient norm {spec.tol:g} in {spec.max_iter} iterations")


def convex_model(W: np.ndarray) -> MLPParams:
    """Wrap fitted weights as a single-layer MLP (zero bias) for ``exact_influence``."""
    K, d = W.shape
    return MLPParams((d, K), [np.array(W, dtype=np.float64)], [np.zeros(K)])


def leave_one_out(spec: ConvexSoftmaxSpec, ds: Dataset, i: int, W_full: np.ndarray | None = None) -> float:
    """L1 norm of the weight change when sample ``i`` is dropped and the model refit."""
    n = len(ds)
    if n > 200:
        raise ValidationError(f"leave-one-out oracle limited to n <= 200, got {n}")
    if not 0 <= i < n:
        raise ValidationError(f"sample index {i} outside [0, {n})")
    if W_full is None:
        W_full = fit_convex(spec, ds)
    W_minus = fit_convex(spec, ds, drop=i)
    return float(np.abs(W_minus - W_full).sum())


def leave_one_out_all(spec: ConvexSoftmaxSpec, ds: Dataset) -> np.ndarray:
    W_full = fit_convex(spec, ds)
    return np.array([leave_one_out(spec, ds, i, W_full) for i in range(len(ds))])


def rank_average(a) -> np.ndarray:
    """1-based ranks, ties receive the mean of the ranks they span."""
    a = np.asarray(a, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    ranks = np.empty(a.size)
    start = 0
    for end in range(1, a.size + 1):
        if end == a.size or sorted_a[end] != sorted_a[start]:
            ranks[order[start:end]] = 0.5 * (start + end - 1) + 1.0
            start = end
    return ranks


def spearman_rank_corr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"spearman needs equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 3:
        raise ValidationError("spearman needs at least 3 points")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise ValidationError("spearman correlation undefined for a constant input")
    ra = rank_average(a) - (a.size + 1) / 2.0
    rb = rank_average(b) - (b.size + 1) / 2.0
    return float(np.clip((ra @ rb) / np.sqrt((ra @ ra) * (rb @ rb)), -1.0, 1.0))
