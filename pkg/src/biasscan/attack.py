"""Iterated sign-gradient (FGSM) steps toward a target category.

The targeted step descends the target-class loss:

    x <- clip(x - eps * sign(grad_x J(x, target)), 0, 1)

and the paired step descends J(x, target) - J(x, source), pushing the input
toward the target and away from the source. sign(0) is 0, so pixels with no
gradient are left alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .mnist import LabeledDataset
from .model import IMAGE_SHAPE
from .tensor import DTYPE, Tensor, grad_wrt_input

SEED_KINDS = ("blank", "noise", "data")
LOSS_KINDS = ("targeted", "paired")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.1
    iterations: int = 10
    seed_kind: str = "data"
    loss_kind: str = "targeted"
    samples_per_cell: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.samples_per_cell < 1:
            raise ValueError("samples_per_cell must be >= 1")
        if self.seed_kind not in SEED_KINDS:
            raise ValueError(f"seed_kind must be one of {SEED_KINDS}, got {self.seed_kind!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def tag(self) -> str:
        return f"{self.seed_kind}_eps{self.epsilon:g}_it{self.iterations}_n{self.samples_per_cell}"


def seed_input(kind: str, ds: LabeledDataset | None = None,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Starting image of shape 1 x 28 x 28: zeros, U[0,1] noise, or a dataset image."""
    rng = rng if rng is not None else np.random.default_rng()
    if kind == "blank":
        return np.zeros(IMAGE_SHAPE, dtype=DTYPE)
    if kind == "noise":
        return rng.random(IMAGE_SHAPE, dtype=DTYPE)
    if kind == "data":
        if ds is None or len(ds) == 0:
            raise ValueError("data seeds need a non-empty dataset")
        return ds.images[int(rng.integers(len(ds)))].copy()
    raise ValueError(f"unknown seed kind {kind!r}")


def _batched(x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    if arr.shape == IMAGE_SHAPE:
        return arr[None], True
    return arr, False


def _step(m, x, target, source, epsilon: float) -> np.ndarray:
    if not 0 <= epsilon <= 1:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    batch, single = _batched(x)
    g = grad_wrt_input(m.forward, batch, target, source)
    out = np.clip(batch - DTYPE(epsilon) * np.sign(g), 0.0, 1.0).astype(DTYPE)
    return out[0] if single else out


def fgsm_step(m, x, y_target, epsilon: float) -> np.ndarray:
    """One targeted step; works on a single image or a batch."""
    return _step(m, x, y_target, None, epsilon)


def paired_fgsm_step(m, x, y_target, y_source, epsilon: float) -> np.ndarray:
    """One step on J(target) - J(source); target and source must differ."""
    if np.any(np.asarray(y_target) == np.asarray(y_source)):
        raise ValueError("paired step needs target != source")
    return _step(m, x, y_target, y_source, epsilon)


def predict_batch(m, x: np.ndarray) -> np.ndarray:
    return m.forward(Tensor(x)).data.argmax(axis=1)


def iterate_attack(m, x0, y_target, cfg: AttackConfig, y_source=None) -> tuple[np.ndarray, np.ndarray | int]:
    """Apply ``cfg.iterations`` steps and return (x_adv, predicted class).

    The prediction is reported whether or not the attack reached the target.
    """
    if cfg.loss_kind == "paired" and y_source is None:
        raise ValueError("paired attacks need a source category")
    batch, single = _batched(x0)
    x = batch
    for _ in range(cfg.iterations):
        if cfg.loss_kind == "paired":
            x = paired_fgsm_step(m, x, y_target, y_source, cfg.epsilon)
        else:
            x = fgsm_step(m, x, y_target, cfg.epsilon)
    pred = predict_batch(m, x)
    if single:
        return x[0], int(pred[0])
    return x, pred
