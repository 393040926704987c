"""Training loop: Adam, plateau-based LR reduction, metrics, evaluation.

One epoch = seeded shuffle of the train partition, batches of 8 (the final
partial batch is trained on), one Adam step per batch, then a full
evaluation-mode pass over train and validation followed by the scheduler
update. Every reported number is determined by the dataset seed plus the
training seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (
    ModelConfig,
    ModelParams,
    batch_loss,
    init_params,
    loss_and_grads,
)
from .pipeline import DatasetSplit, SequenceSample
from .seeds import derive_rng, derive_seed

METRICS_MAGIC = "# ccid-metrics v1"
METRICS_COLUMNS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc", "lr")
EVAL_BATCH = 64


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 7.5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 30
    batch_size: int = 8
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_threshold: float = 1e-8
    grad_clip: float | None = None  # optional max-norm, off by default
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    """Per-tensor first/second moments plus the step counter and current LR."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int
    current_lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, config: TrainConfig) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t=0,
            current_lr=config.learning_rate,
            beta1=config.beta1,
            beta2=config.beta2,
            epsilon=config.epsilon,
        )


def adam_step(
    params: ModelParams, grads: dict[str, np.ndarray], state: AdamState
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, in place, at ``state.current_lr``."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    lr = state.current_lr
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in tensor {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` epochs without a
    validation-loss improvement greater than ``threshold``. The stall counter
    resets on each reduction; best-so-far is kept."""

    def __init__(self, initial_lr: float, factor: float, patience: int, threshold: float = 1e-8):
        self.lr = initial_lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.stalled = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.stalled = 0
        else:
            self.stalled += 1
            if self.stalled >= self.patience:
                self.lr *= self.factor
                self.stalled = 0
        return self.lr


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    lr_after: float


@dataclass
class EvalResult:
    accuracy: float
    mean_loss: float
    confusion: np.ndarray  # (classes, classes) int counts, rows = true class

    def per_class_precision_recall(self) -> list[tuple[float, float]]:
        out = []
        for i in range(self.confusion.shape[0]):
            col = self.confusion[:, i].sum()
            row = self.confusion[i, :].sum()
            precision = self.confusion[i, i] / col if col else 0.0
            recall = self.confusion[i, i] / row if row else 0.0
            out.append((float(precision), float(recall)))
        return out


def _as_arrays(samples: list[SequenceSample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.features for s in samples])
    y = np.array([s.label.index for s in samples], dtype=int)
    return x, y


def evaluate(params: ModelParams, samples: list[SequenceSample]) -> EvalResult:
    """Evaluation-mode accuracy, mean loss, and the 4x4 confusion matrix."""
    if not samples:
        raise TrainingError("cannot evaluate an empty sample set")
    x, y = _as_arrays(samples)
    n_classes = params.config.num_classes
    confusion = np.zeros((n_classes, n_classes), dtype=int)
    losses = []
    for start in range(0, len(y), EVAL_BATCH):
        xb = x[start : start + EVAL_BATCH]
        yb = y[start : start + EVAL_BATCH]
        loss, pred = batch_loss(xb, yb, params)
        losses.append(loss * len(yb))
        for true, guessed in zip(yb, pred):
            confusion[true, guessed] += 1
    accuracy = float(np.trace(confusion) / len(y))
    return EvalResult(accuracy, sum(losses) / len(y), confusion)


@dataclass
class TrainResult:
    final_params: ModelParams
    best_params: ModelParams
    best_val_loss: float
    metrics: list[EpochMetrics]
    optimizer: AdamState


def write_metrics(path: str | Path, metrics: list[EpochMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_MAGIC + "\n")
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for m in metrics:
            fh.write(
                f"{m.epoch},{m.train_loss!r},{m.val_loss!r},"
                f"{m.train_acc!r},{m.val_acc!r},{m.lr_after!r}\n"
            )


def read_metrics(path: str | Path) -> list[EpochMetrics]:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise TrainingError(f"{path}: empty metrics file")
    header = tuple(lines[0].split(","))
    if header != METRICS_COLUMNS:
        missing = [c for c in METRICS_COLUMNS if c not in header]
        raise TrainingError(f"{path}: missing columns {missing}")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        out.append(
            EpochMetrics(
                epoch=int(parts[0]),
                train_loss=float(parts[1]),
                val_loss=float(parts[2]),
                train_acc=float(parts[3]),
                val_acc=float(parts[4]),
                lr_after=float(parts[5]),
            )
        )
    return out


def train(
    dataset: DatasetSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
    *,
    initial: ModelParams | None = None,
    optimizer: AdamState | None = None,
    start_epoch: int = 0,
    log_path: str | Path | None = None,
    progress=None,
) -> TrainResult:
    """Run the full training recipe and return final + best-validation params.

    ``initial``/``optimizer``/``start_epoch`` restore a checkpointed run; the
    epoch count in ``train_config.epochs`` is the total, so resuming trains
    the remaining epochs.
    """
    if not dataset.train or not dataset.validation:
        raise TrainingError("dataset must have nonempty train and validation splits")
    params = initial if initial is not None else init_params(model_config, train_config.seed)
    state = optimizer if optimizer is not None else AdamState.fresh(params, train_config)
    scheduler = PlateauScheduler(
        state.current_lr,
        train_config.plateau_factor,
        train_config.plateau_patience,
        train_config.plateau_threshold,
    )
    x_train, y_train = _as_arrays(dataset.train)
    n = len(y_train)
    metrics: list[EpochMetrics] = []
    best_val = math.inf
    best_params = params.clone()
    log_fh = open(log_path, "w", newline="") if log_path else None
    if log_fh:
        log_fh.write(METRICS_MAGIC + "\n")
        log_fh.write(",".join(METRICS_COLUMNS) + "\n")
    try:
        for epoch in range(start_epoch, train_config.epochs):
            order = list(range(n))
            derive_rng(train_config.seed, "shuffle", epoch).shuffle(order)
            for b, start in enumerate(range(0, n, train_config.batch_size)):
                idx = order[start : start + train_config.batch_size]
                try:
                    loss, grads = loss_and_grads(
                        x_train[idx],
                        y_train[idx],
                        params,
                        training=True,
                        dropout_seed=derive_seed(train_config.seed, "dropout", epoch, b),
                    )
                    if train_config.grad_clip is not None:
                        clip_gradients(grads, train_config.grad_clip)
                    params, state = adam_step(params, grads, state)
                except (TrainingError, ValueError) as exc:
                    raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc

            train_eval = evaluate(params, dataset.train)
            val_eval = evaluate(params, dataset.validation)
            state.current_lr = scheduler.update(val_eval.mean_loss)
            record = EpochMetrics(
                epoch=epoch,
                train_loss=train_eval.mean_loss,
                val_loss=val_eval.mean_loss,
                train_acc=train_eval.accuracy,
                val_acc=val_eval.accuracy,
                lr_after=state.current_lr,
            )
            metrics.append(record)
            if log_fh:
                log_fh.write(
                    f"{record.epoch},{record.train_loss!r},{record.val_loss!r},"
                    f"{record.train_acc!r},{record.val_acc!r},{record.lr_after!r}\n"
                )
                log_fh.flush()
            if val_eval.mean_loss < best_val:
                best_val = val_eval.mean_loss
                best_params = params.clone()
            if progress is not None:
                progress(record)
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(params, best_params, best_val, metrics, state)
