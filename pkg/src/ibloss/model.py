"""Multilayer perceptron with hand-written backprop.

Hidden layers are ``relu(W a + b)``; the last layer is affine and its input
``h`` is kept on the trace because the IB factor is computed from it.
Every function accepts either a single sample (1-D ``x``) or a batch
(2-D ``X``, one row per sample).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ibloss._io import atomic_write_bytes
from ibloss.errors import ValidationError
from ibloss.numerics import check_finite, one_hot, seeded_rng, stable_softmax

CHECKPOINT_MAGIC = b"IBMLP001"


@dataclass
class MLPParams:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]  # layer i: (layer_sizes[i+1], layer_sizes[i])
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        n = len(self.layer_sizes) - 1
        if n < 1 or len(self.weights) != n or len(self.biases) != n:
            raise ValidationError(
                f"{len(self.weights)} weight / {len(self.biases)} bias arrays "
                f"for layer_sizes {self.layer_sizes}"
            )
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if W.shape != shape or b.shape != (shape[0],):
                raise ValidationError(
                    f"layer {i}: weight {W.shape} / bias {b.shape}, expected {shape} / ({shape[0]},)"
                )

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_features(self) -> int:
        return self.layer_sizes[0]

    def copy(self) -> "MLPParams":
        return MLPParams(
            self.layer_sizes,
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for W, b in zip(self.weights, self.biases) for a in (W, b)])

    def with_flat(self, theta: np.ndarray) -> "MLPParams":
        """New model with parameters taken from a flat vector (``flat()`` order)."""
        out = self.copy()
        pos = 0
        for W, b in zip(out.weights, out.biases):
            for a in (W, b):
                a[...] = np.reshape(theta[pos:pos + a.size], a.shape)
                pos += a.size
        return out


@dataclass
class Grads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for W, b in zip(self.weights, self.biases) for a in (W, b)])


@dataclass
class ForwardTrace:
    """Per-layer record of a forward pass.

    ``activations[i]`` is the input to layer ``i`` (so ``activations[0]`` is x
    and ``activations[-1]`` is h); ``preacts[i]`` is layer ``i``'s affine output
    before the nonlinearity.
    """

    activations: list[np.ndarray]
    preacts: list[np.ndarray]
    probs: np.ndarray
    layer_sizes: tuple[int, ...] = field(default=())

    @property
    def h(self) -> np.ndarray:
        return self.activations[-1]

    @property
    def logits(self) -> np.ndarray:
        return self.preacts[-1]

    @property
    def batched(self) -> bool:
        return self.probs.ndim == 2


def init_model(layer_sizes, seed: int) -> MLPParams:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    sizes = [int(s) for s in layer_sizes] if layer_sizes is not None else []
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValidationError(f"layer_sizes needs >= 2 entries, all >= 1; got {layer_sizes}")
    rng = seeded_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return MLPParams(tuple(sizes), weights, biases)


def forward(model: MLPParams, x) -> ForwardTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != model.n_features:
        raise ValidationError(f"input shape {x.shape} does not match d_in={model.n_features}")
    a = x
    activations, preacts = [], []
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        activations.append(a)
        z = a @ W.T + b
        preacts.append(z)
        if i < last:
            a = np.maximum(z, 0.0)
    return ForwardTrace(activations, preacts, stable_softmax(preacts[-1]), model.layer_sizes)


def _check_trace(model: MLPParams, trace: ForwardTrace):
    if trace.layer_sizes != model.layer_sizes or len(trace.preacts) != len(model.weights):
        raise ValidationError(
            f"trace from layers {trace.layer_sizes} used with model {model.layer_sizes}"
        )


def backward_logits(model: MLPParams, trace: ForwardTrace, dlogits) -> Grads:
    """Backpropagate a given gradient w.r.t. the logits.

    For a batch, ``dlogits`` has one row per sample and the returned
    gradients are the sum over rows.
    """
    _check_trace(model, trace)
    delta = np.asarray(dlogits, dtype=np.float64)
    if delta.shape != trace.logits.shape:
        raise ValidationError(f"dlogits shape {delta.shape} != logits shape {trace.logits.shape}")
    n = len(model.weights)
    gW: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        a = trace.activations[i]
        if trace.batched:
            gW[i] = delta.T @ a
            gb[i] = delta.sum(axis=0)
        else:
            gW[i] = np.outer(delta, a)
            gb[i] = delta.copy()
        if i > 0:
            delta = (delta @ model.weights[i]) * (trace.preacts[i - 1] > 0.0)
    return Grads(gW, gb)


def ce_logit_grad(trace: ForwardTrace, y) -> np.ndarray:
    """d CE / d logits = f - y (one row per sample for batches)."""
    return trace.probs - one_hot(y, trace.probs.shape[-1])


def backward(model: MLPParams, trace: ForwardTrace, y, sample_weight=1.0) -> Grads:
    """Gradients of ``sample_weight * CE(probs, y)``.

    For a batch, ``y`` and ``sample_weight`` are per-sample arrays (or a
    scalar weight) and the result is the weighted sum over samples.
    """
    w = np.asarray(sample_weight, dtype=np.float64)
    if np.any(w < 0):
        raise ValidationError("sample_weight must be >= 0")
    dl = ce_logit_grad(trace, y)
    if trace.batched and w.ndim == 1:
        dl = dl * w[:, None]
    else:
        dl = dl * w
    return backward_logits(model, trace, dl)


def last_layer_grad_l1(trace: ForwardTrace, y):
    """L1 norm of the final-layer weight gradient (biases excluded).

    Computed from the explicit gradient matrix (f - y) h^T; for a batch,
    one value per sample.
    """
    resid = ce_logit_grad(trace, y)
    if trace.batched:
        return np.abs(resid[:, :, None] * trace.h[:, None, :]).sum(axis=(1, 2))
    return float(np.abs(np.outer(resid, trace.h)).sum())


def predict(model: MLPParams, x):
    """Argmax of the logits; ties go to the smallest class index."""
    return np.argmax(forward(model, x).logits, axis=-1)


def save_checkpoint(model: MLPParams, path) -> Path:
    """Binary checkpoint, all little-endian.

    Layout: 8-byte magic ``IBMLP001``; uint32 number of sizes; uint32 per
    size; then for each layer the float64 weight matrix (row-major) followed
    by the float64 bias vector.
    """
    sizes = model.layer_sizes
    parts = [CHECKPOINT_MAGIC, struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes)]
    for W, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path) -> MLPParams:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not an MLP checkpoint (bad magic)")
    try:
        (count,) = struct.unpack_from("<I", raw, 8)
        sizes = struct.unpack_from(f"<{count}I", raw, 12)
    except struct.error as exc:
        raise ValidationError(f"{path}: truncated header") from exc
    pos = 12 + 4 * count
    expected = pos + 8 * sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))
    if len(raw) != expected:
        raise ValidationError(f"{path}: size {len(raw)} bytes, expected {expected}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = np.frombuffer(raw, dtype="<f8", count=fan_out * fan_in, offset=pos)
        pos += 8 * fan_out * fan_in
        b = np.frombuffer(raw, dtype="<f8", count=fan_out, offset=pos)
        pos += 8 * fan_out
        weights.append(W.astype(np.float64).reshape(fan_out, fan_in))
        biases.append(b.astype(np.float64))
    model = MLPParams(tuple(sizes), weights, biases)
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        check_finite(W, f"{path} layer {i} weights")
        check_finite(b, f"{path} layer {i} biases")
    return model
