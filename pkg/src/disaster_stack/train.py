"""Mini-batch training: augmentation, epochs, validation, early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, TrainingError
from .images import bilinear_sample
from .models import Model
from .optim import AdamState, adam_step
from .tensor import Tensor, backward, sparse_ce_loss

log = logging.getLogger(__name__)

MIN_DELTA = 1e-6
HISTORY_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc")


@dataclass
class AugmentConfig:
    enabled: bool = False
    flip_horizontal: bool = True
    flip_vertical: bool = True
    rotation_fraction: float = 0.1
    zoom_fraction: float = 0.1
    contrast_fraction: float = 0.1

    def __post_init__(self):
        for name in ("rotation_fraction", "zoom_fraction", "contrast_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {value}")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 90
    batch_size: int = 64
    patience: int = 20
    monitor: str = "val_accuracy"
    seed: int = 0
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_path: str | None = None

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentConfig(**self.augmentation)
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")
        if self.monitor not in ("val_accuracy", "val_loss"):
            raise ValueError(f"monitor must be val_accuracy or val_loss, got {self.monitor!r}")


# Regimes used for the two base models.
CNN_REGIME = dict(learning_rate=0.001, epochs=90, batch_size=64, patience=20)
RESNET_REGIME = dict(learning_rate=0.0001, epochs=150, batch_size=16, patience=20)


@dataclass
class ArraySplit:
    images: np.ndarray  # (N, H, W, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,) int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self):
        return int(self.labels.shape[0])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    def to_csv(self, path):
        write_history_csv(self, path)


def write_history_csv(history: TrainHistory, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for r in history.records:
            writer.writerow([r.epoch] + [repr(float(v)) for v in
                            (r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy)])


def read_history_csv(path) -> TrainHistory:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    records = [
        EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]),
                    float(r["val_loss"]), float(r["val_acc"]))
        for r in rows
    ]
    return TrainHistory(records, stopped_epoch=len(records))


# --------------------------------------------------------------- augmentation


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    """Scale each channel around its mean; factor 1 is an exact identity."""
    mean = image.mean(axis=(0, 1), dtype=np.float64).astype(image.dtype)
    out = image * np.float32(factor) + mean * np.float32(1.0 - factor)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def rotate_zoom(image: np.ndarray, angle: float, zoom: float) -> np.ndarray:
    """Rotate by ``angle`` radians and zoom by ``zoom`` about the image centre.

    Bilinear resampling; samples falling outside the image take the nearest
    edge pixel.
    """
    h, w = image.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = (yy - cy) / zoom, (xx - cx) / zoom
    cos, sin = math.cos(angle), math.sin(angle)
    src_y = cy + cos * dy - sin * dx
    src_x = cx + sin * dy + cos * dx
    return bilinear_sample(image, src_y, src_x)


def augment_batch(batch: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random flip / rotation / zoom / contrast, sampled independently per image."""
    if not config.enabled:
        return batch
    out = np.empty_like(batch)
    for i, image in enumerate(batch):
        flip_h = config.flip_horizontal and rng.random() < 0.5
        flip_v = config.flip_vertical and rng.random() < 0.5
        angle = rng.uniform(-1.0, 1.0) * config.rotation_fraction * 2.0 * math.pi
        zoom = 1.0 + rng.uniform(-1.0, 1.0) * config.zoom_fraction
        contrast = 1.0 + rng.uniform(-1.0, 1.0) * config.contrast_fraction
        if flip_h:
            image = image[:, ::-1]
        if flip_v:
            image = image[::-1]
        if angle != 0.0 or zoom != 1.0:
            image = rotate_zoom(image, angle, zoom)
        if contrast != 1.0:
            image = adjust_contrast(image, contrast)
        out[i] = image
    return out


# ----------------------------------------------------------------- training


def batch_slices(n: int, batch_size: int):
    """Index ranges covering ``n`` items, last partial batch included."""
    return [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


def shuffle_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def run_epoch(model: Model, optimizer: AdamState, train_split: ArraySplit, config: TrainConfig,
              epoch: int = 1):
    """One pass over ``train_split`` in seeded shuffle order.

    Returns ``(train_loss, train_accuracy)`` averaged over examples.
    """
    n = len(train_split)
    if n == 0:
        raise DataError("cannot run an epoch on an empty training split")
    order = shuffle_order(n, config.seed, epoch)
    aug_rng = np.random.default_rng([config.seed, epoch, 1])
    params = model.weights.trainable()
    arrays = {k: t.data for k, t in params.items()}
    loss_sum, correct = 0.0, 0
    for start, stop in batch_slices(n, config.batch_size):
        idx = order[start:stop]
        x = train_split.images[idx]
        y = train_split.labels[idx]
        x = augment_batch(x, config.augmentation, aug_rng)
        for t in params.values():
            t.grad = None
        logits = model(Tensor(x), training=True)
        loss = sparse_ce_loss(logits, y)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        backward(loss)
        grads = {k: t.grad for k, t in params.items() if t.grad is not None}
        adam_step(arrays, grads, optimizer, config.learning_rate)
        loss_sum += value * len(idx)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return loss_sum / n, correct / n


def evaluate_split(model: Model, split: ArraySplit, batch_size: int = 64):
    """Inference-mode ``(loss, accuracy, probabilities)`` over a split."""
    if len(split) == 0:
        raise DataError("cannot evaluate an empty split")
    probs = model.predict_proba(split.images, chunk_size=batch_size)
    picked = probs[np.arange(len(split)), split.labels].astype(np.float64)
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-12))))
    accuracy = float(np.mean(probs.argmax(axis=1) == split.labels))
    return loss, accuracy, probs


class EarlyStopping:
    """Tracks the monitored metric; ``update`` says whether it improved.

    Improvement means beating the best value so far by more than 1e-6.
    Training stops after ``patience`` consecutive epochs without improvement
    (``patience`` 0 stops at the first such epoch).
    """

    def __init__(self, patience: int, mode: str = "max", min_delta: float = MIN_DELTA):
        self.patience = patience
        self.mode = mode
        self.min_delta = min_delta
        self.best = -math.inf if mode == "max" else math.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, value: float) -> bool:
        if self.mode == "max":
            improved = value > self.best + self.min_delta
        else:
            improved = value < self.best - self.min_delta
        if improved:
            self.best, self.best_epoch, self.wait = value, epoch, 0
        else:
            self.wait += 1
        return improved

    @property
    def should_stop(self) -> bool:
        return self.wait >= max(self.patience, 1)


def fit(model: Model, train_split: ArraySplit, val_split: ArraySplit, config: TrainConfig,
        evaluate=None, on_epoch=None):
    """Train with per-epoch validation, best-model checkpointing and early stopping.

    ``evaluate(model, split) -> (loss, accuracy)`` replaces the default
    validation pass when given. ``on_epoch(epoch, model, optimizer)`` is
    called after each epoch; a true return value ends training there. Returns ``(best_weights, history)``; the model
    is left holding the restored best weights.
    """
    if evaluate is None:
        def evaluate(m, split):
            loss, acc, _ = evaluate_split(m, split)
            return loss, acc

    optimizer = AdamState()
    mode = "max" if config.monitor == "val_accuracy" else "min"
    stopper = EarlyStopping(config.patience, mode)
    history = TrainHistory()
    best = None
    for epoch in range(1, config.epochs + 1):
        train_loss, train_acc = run_epoch(model, optimizer, train_split, config, epoch)
        val_loss, val_acc = evaluate(model, val_split)
        history.records.append(EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc))
        history.stopped_epoch = epoch
        value = val_acc if config.monitor == "val_accuracy" else val_loss
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        log.info("epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
                 epoch, train_loss, train_acc, val_loss, val_acc)
        if stopper.update(epoch, value):
            model.weights.epoch = epoch
            model.weights.val_accuracy = float(val_acc)
            best = model.weights.copy()
            if config.checkpoint_path:
                save_checkpoint(model.spec, model.weights, optimizer, config.checkpoint_path)
        if on_epoch is not None and on_epoch(epoch, model, optimizer):
            break
        if stopper.should_stop:
            break
    history.best_epoch = stopper.best_epoch
    if config.checkpoint_path:
        _, best, _, _ = load_checkpoint(config.checkpoint_path, expected_spec=model.spec)
    model.weights = best
    return best, history


def split_arrays(images: np.ndarray, labels: np.ndarray, indices) -> ArraySplit:
    indices = np.asarray(indices, dtype=np.int64)
    return ArraySplit(images[indices], labels[indices])


def history_path(out_dir, model_kind: str) -> Path:
    return Path(out_dir) / f"history_{model_kind}.csv"
