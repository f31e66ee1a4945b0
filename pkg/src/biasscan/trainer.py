"""SGD training, fine-tuning, confusion matrices and mean digit maps."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .mnist import LabeledDataset
from .model import CnnModel
from .tensor import DTYPE, NUM_CLASSES, Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    role: str = "clean"

    def __post_init__(self):
        if self.role not in ("clean", "finetune"):
            raise ValueError(f"role must be 'clean' or 'finetune', got {self.role!r}")
        # a zero-epoch fine-tune is a legal no-op; clean training needs at least one pass
        min_epochs = 1 if self.role == "clean" else 0
        if int(self.epochs) != self.epochs or self.epochs < min_epochs:
            raise ValueError(f"epochs must be an integer >= {min_epochs}, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError(f"lr must be a finite non-negative number, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    @classmethod
    def finetune_default(cls, seed: int = 1) -> "TrainConfig":
        return cls(epochs=2, batch_size=64, lr=0.005, momentum=0.9, seed=seed, role="finetune")


class SGD:
    """Heavy-ball SGD: v <- momentum * v + g ; p <- p - lr * v."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, momentum: float = 0.0):
        self.params = params
        self.lr = DTYPE(lr)
        self.momentum = DTYPE(momentum)
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p -= self.lr * v


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train(m: CnnModel, ds: LabeledDataset, cfg: TrainConfig,
          on_record: Callable[[dict], None] | None = None) -> tuple[CnnModel, list[dict]]:
    """Train a copy of ``m``; returns the trained copy and per-epoch history."""
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = m.copy()
    opt = SGD(model.params, cfg.lr, cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    history: list[dict] = []
    for epoch in range(1, cfg.epochs + 1):
        total_loss = 0.0
        correct = 0
        for b, idx in enumerate(_batches(len(ds), cfg.batch_size, rng)):
            params = {k: Tensor(v, requires_grad=True) for k, v in model.params.items()}
            with T.Tape():
                z = model.forward(Tensor(ds.images[idx]), params)
                loss = T.softmax_cross_entropy(z, ds.labels[idx], reduction="mean")
                T.backward(loss)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"{cfg.role} training diverged: loss {value} at epoch {epoch}, batch {b}")
            opt.step({k: t.grad for k, t in params.items()})
            total_loss += value * len(idx)
            correct += int((z.data.argmax(axis=1) == ds.labels[idx]).sum())
        record = {
            "epoch": epoch,
            "split": "train",
            "role": cfg.role,
            "loss": total_loss / len(ds),
            "accuracy": correct / len(ds),
        }
        history.append(record)
        log.info("%s epoch %d: loss %.4f acc %.4f", cfg.role, epoch, record["loss"], record["accuracy"])
        if on_record:
            on_record(record)
    model.metadata.update(
        {"role": "clean" if cfg.role == "clean" else "backdoor", "train": asdict(cfg)})
    return model, history


def finetune(clean: CnnModel, poisoned_ds: LabeledDataset, cfg: TrainConfig,
             pristine_test: LabeledDataset | None = None,
             poisoned_test: LabeledDataset | None = None,
             on_record: Callable[[dict], None] | None = None) -> tuple[CnnModel, list[dict]]:
    """Fine-tune a copy of the clean model on a mixed poisoned/pristine set.

    When test sets are given, pristine accuracy and attack success are
    appended to the history, with a warning if they miss 0.95 / 0.90.
    """
    if cfg.role != "finetune":
        cfg = TrainConfig(**{**asdict(cfg), "role": "finetune"})
    if cfg.epochs == 0:
        model = clean.copy()
        history: list[dict] = []
    else:
        model, history = train(clean, poisoned_ds, cfg, on_record)
    if pristine_test is not None or poisoned_test is not None:
        record: dict = {"epoch": cfg.epochs, "split": "test", "role": "finetune"}
        warnings = []
        if pristine_test is not None:
            record["accuracy"] = confusion(model, pristine_test).accuracy
            if record["accuracy"] < 0.95:
                warnings.append(f"pristine accuracy {record['accuracy']:.4f} < 0.95")
        if poisoned_test is not None:
            record["attack_success"] = attack_success(model, poisoned_test)
            if poisoned_test.trigger and poisoned_test.trigger.startswith("patch") \
                    and record["attack_success"] < 0.90:
                warnings.append(f"attack success {record['attack_success']:.4f} < 0.90")
        if warnings:
            record["warning"] = "; ".join(warnings)
            log.warning("fine-tune: %s", record["warning"])
        history.append(record)
        if on_record:
            on_record(record)
    return model, history


def dataset_loss(m: CnnModel, ds: LabeledDataset, batch_size: int = 500) -> float:
    total = 0.0
    for i in range(0, len(ds), batch_size):
        z = m.forward(Tensor(ds.images[i:i + batch_size]))
        total += T.softmax_cross_entropy(z, ds.labels[i:i + batch_size], "sum").item()
    return total / len(ds)


def history_jsonl(history: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in history)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are true labels, columns are predicted labels."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.shape != (NUM_CLASSES, NUM_CLASSES) or c.dtype.kind not in "iu" or (c < 0).any():
            raise ValueError("confusion matrix must be a 10x10 array of non-negative integers")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else float("nan")

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def recall(self) -> np.ndarray:
        rows = self.row_sums()
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.counts) / np.maximum(rows, 1), np.nan)

    def to_dict(self) -> dict:
        return {"counts": self.counts.tolist(), "accuracy": self.accuracy, "total": self.total}


def confusion_from_predictions(labels, predictions) -> ConfusionMatrix:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    counts = np.bincount(labels * NUM_CLASSES + predictions, minlength=NUM_CLASSES ** 2)
    return ConfusionMatrix(counts.reshape(NUM_CLASSES, NUM_CLASSES).astype(np.int64))


def confusion(m, ds: LabeledDataset) -> ConfusionMatrix:
    """Confusion matrix of any classifier exposing ``predict(images)``."""
    return confusion_from_predictions(ds.labels, m.predict(ds.images))


def attack_success(m, poisoned_ds: LabeledDataset) -> float:
    """Fraction of triggered samples predicted as their (relabeled) target."""
    mask = poisoned_ds.poisoned
    if not mask.any():
        return float("nan")
    pred = m.predict(poisoned_ds.images[mask])
    return float((pred == poisoned_ds.labels[mask]).mean())


def mean_digit_maps(ds: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-label mean image (10 x 1 x 28 x 28) and a per-label empty flag."""
    shape = ds.images.shape[1:]
    sums = np.zeros((NUM_CLASSES,) + shape, dtype=np.float64)
    for c in range(NUM_CLASSES):
        sums[c] = ds.images[ds.labels == c].sum(axis=0, dtype=np.float64)
    counts = np.bincount(ds.labels, minlength=NUM_CLASSES)
    empty = counts == 0
    maps = sums / np.maximum(counts, 1).reshape((-1,) + (1,) * len(shape))
    return maps.astype(DTYPE), empty
