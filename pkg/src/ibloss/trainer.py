"""Two-phase SGD training: normal training, then influence-balanced fine-tuning.

Epochs are 0-based internally: epoch ``e`` belongs to the normal phase when
``e < transition_epoch`` and to the fine-tuning phase otherwise. The
optimizer state carries over the phase boundary untouched.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from ibloss._io import atomic_write_text
from ibloss.data import Dataset
from ibloss.errors import NumericalError, ValidationError
from ibloss.losses import LossSpec, class_weight_vector, sample_terms
from ibloss.model import Grads, MLPParams, backward_logits, forward
from ibloss.numerics import seeded_rng

logger = logging.getLogger(__name__)

PHASE_NORMAL = "normal"
PHASE_FINETUNE = "finetune"


@dataclass
class TrainConfig:
    total_epochs: int = 200
    transition_epoch: int | None = None  # None -> total_epochs // 2
    batch_size: int = 128
    base_lr: float = 0.1
    warmup_epochs: int = 5
    decay_points: list[tuple[int, float]] = field(default_factory=list)
    momentum: float = 0.9
    weight_decay: float = 2e-4
    phase1_loss: LossSpec = field(default_factory=LossSpec)
    phase2_loss: LossSpec = field(default_factory=lambda: LossSpec(kind="ib"))
    seed: int = 0

    def __post_init__(self):
        if self.transition_epoch is None:
            self.transition_epoch = self.total_epochs // 2
        self.decay_points = [(int(e), float(f)) for e, f in self.decay_points]
        if self.total_epochs < 1:
            raise ValidationError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not 0 <= self.transition_epoch <= self.total_epochs:
            raise ValidationError(
                f"transition_epoch must lie in [0, {self.total_epochs}], got {self.transition_epoch}"
            )
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr > 0:
            raise ValidationError(f"base_lr must be > 0, got {self.base_lr}")
        if self.warmup_epochs < 0:
            raise ValidationError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        epochs = [e for e, _ in self.decay_points]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValidationError(f"decay_points must be strictly increasing in epoch: {epochs}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class EpochRecord:
    epoch: int  # 1-based
    phase: str
    lr: float
    loss: float
    accuracy: float
    weight_mean: float | None = None
    weight_min: float | None = None
    weight_max: float | None = None


HISTORY_COLUMNS = (
    "epoch", "phase", "lr", "loss", "accuracy", "weight_mean", "weight_min", "weight_max",
)


@dataclass
class RunHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def phases(self) -> list[str]:
        return [r.phase for r in self.records]

    def to_csv(self) -> str:
        """One row per epoch in HISTORY_COLUMNS order; floats as repr, missing stats empty."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.records:
            row = [getattr(r, c) for c in HISTORY_COLUMNS]
            w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    def save(self, path):
        return atomic_write_text(path, self.to_csv())


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Linear warmup over the first epochs, then step decay."""
    if not 0 <= epoch < config.total_epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {config.total_epochs})")
    if epoch < config.warmup_epochs:
        return config.base_lr * (epoch + 1) / config.warmup_epochs
    lr = config.base_lr
    for at, factor in config.decay_points:
        if at <= epoch:
            lr *= factor
    return lr


def sgd_step(params: MLPParams, grads: Grads, velocity: Grads | None, lr: float,
             momentum: float, weight_decay: float) -> tuple[MLPParams, Grads]:
    """v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v.

    Weight decay applies to weights and biases alike.
    """
    if velocity is None:
        velocity = zeros_like(params)
    new_p, new_v = params.copy(), Grads([], [])
    for group in ("weights", "biases"):
        ps, gs, vs = getattr(new_p, group), getattr(grads, group), getattr(velocity, group)
        if len(ps) != len(gs) or len(ps) != len(vs):
            raise ValidationError(f"{group}: parameter / gradient / velocity count mismatch")
        out_v = getattr(new_v, group)
        for p, g, v in zip(ps, gs, vs):
            if p.shape != g.shape or p.shape != v.shape:
                raise ValidationError(f"{group}: shape mismatch {p.shape} / {g.shape} / {v.shape}")
            nv = momentum * v + (g + weight_decay * p)
            p -= lr * nv
            out_v.append(nv)
    return new_p, new_v


def zeros_like(params: MLPParams) -> Grads:
    return Grads([np.zeros_like(W) for W in params.weights], [np.zeros_like(b) for b in params.biases])


def make_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded permutation of range(n) for (seed, epoch), chunked; the last batch may be short."""
    if n < 1:
        raise ValidationError("cannot batch an empty dataset")
    perm = seeded_rng(seed, stream=epoch).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _params_finite(model: MLPParams) -> bool:
    return all(np.all(np.isfinite(a)) for a in model.weights + model.biases)


def train(model: MLPParams, train_ds: Dataset, config: TrainConfig) -> tuple[MLPParams, RunHistory]:
    if len(train_ds) == 0:
        raise ValidationError("training set is empty")
    if train_ds.n_features != model.n_features or train_ds.n_classes != model.n_classes:
        raise ValidationError(
            f"dataset (d={train_ds.n_features}, K={train_ds.n_classes}) does not fit model "
            f"{model.layer_sizes}"
        )
    counts = train_ds.class_counts
    X, Y = train_ds.features, train_ds.labels
    history = RunHistory()
    velocity = zeros_like(model)
    model = model.copy()
    cw1 = class_weight_vector(config.phase1_loss, counts)
    cw2 = None

    if not np.all(np.isfinite(X)):
        raise ValidationError("training features contain NaN or Inf")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for epoch in range(config.total_epochs):
                finetune = epoch >= config.transition_epoch
                if finetune and cw2 is None:
                    # class weights are fixed from training counts on phase-2 entry
                    cw2 = class_weight_vector(config.phase2_loss, counts)
                spec, cw = (config.phase2_loss, cw2) if finetune else (config.phase1_loss, cw1)
                lr = lr_at(config, epoch)
                loss_sum = 0.0
                weights_seen = []
                for idx in make_batches(len(train_ds), config.batch_size, config.seed, epoch):
                    trace = forward(model, X[idx])
                    losses, weights, dlogits = sample_terms(spec, cw, trace.probs, Y[idx], trace.h)
                    grads = backward_logits(model, trace, dlogits / len(idx))
                    model, velocity = sgd_step(model, grads, velocity, lr, config.momentum, config.weight_decay)
                    loss_sum += float(losses.sum())
                    if spec.is_ib:
                        weights_seen.append(weights)
                if not _params_finite(model) or not np.isfinite(loss_sum):
                    raise NumericalError(f"training diverged at epoch {epoch + 1} (non-finite parameters or loss)")
                acc = float(np.mean(np.argmax(forward(model, X).logits, axis=1) == Y))
                rec = EpochRecord(epoch + 1, PHASE_FINETUNE if finetune else PHASE_NORMAL, lr,
                                  loss_sum / len(train_ds), acc)
                if weights_seen:
                    w = np.concatenate(weights_seen)
                    rec.weight_mean, rec.weight_min, rec.weight_max = float(w.mean()), float(w.min()), float(w.max())
                history.records.append(rec)
                logger.debug("epoch %d %s lr=%.4g loss=%.5f acc=%.4f", rec.epoch, rec.phase, lr, rec.loss, acc)
    except ValidationError as exc:
        # inputs were checked above, so anything raised in the loop is an overflow
        raise NumericalError(f"training diverged: {exc}") from None
    return model, history
