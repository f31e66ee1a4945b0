"""Backdoor triggers and poisoned dataset construction."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .mnist import LabeledDataset

KINDS = ("patch_fixed", "patch_random", "multiply", "blend")

# 4x4 "C": left column plus top and bottom rows
C_PATCH = np.array(
    [[1, 1, 1, 1],
     [1, 0, 0, 0],
     [1, 0, 0, 0],
     [1, 1, 1, 1]], dtype=bool)
TOP_RIGHT_ANCHOR = (2, 22)
BLANK_THRESHOLD = 0.1
IMAGE_HW = (28, 28)


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    kind: str = "patch_fixed"
    bitmap: np.ndarray = field(default_factory=lambda: C_PATCH.copy())
    intensity: float = 1.0
    anchor: tuple[int, int] = TOP_RIGHT_ANCHOR
    gain: float = 2.0
    alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}; expected one of {KINDS}")
        bitmap = np.asarray(self.bitmap, dtype=bool)
        object.__setattr__(self, "bitmap", bitmap)
        object.__setattr__(self, "anchor", tuple(int(a) for a in self.anchor))
        h, w = bitmap.shape if bitmap.ndim == 2 else (0, 0)
        if bitmap.ndim != 2 or not (0 < h <= IMAGE_HW[0] and 0 < w <= IMAGE_HW[1]):
            raise ValueError(f"patch bitmap must be 2-D and fit within 28x28, got {bitmap.shape}")
        r, c = self.anchor
        if not (0 <= r <= IMAGE_HW[0] - h and 0 <= c <= IMAGE_HW[1] - w):
            raise ValueError(f"anchor {self.anchor} places the patch outside the image")
        if not 0 <= self.intensity <= 1:
            raise ValueError("patch intensity must lie in [0, 1]")
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")

    def __eq__(self, other) -> bool:
        return isinstance(other, TriggerSpec) and self.to_dict() == other.to_dict()

    __hash__ = None

    @property
    def trigger_id(self) -> str:
        if self.kind == "multiply":
            return f"multiply(gain={self.gain:g})"
        if self.kind == "blend":
            return f"blend(alpha={self.alpha:g})"
        return self.kind

    def mask(self, anchor: tuple[int, int] | None = None) -> np.ndarray:
        """Full-image boolean mask of the patch pixels at ``anchor``."""
        r, c = self.anchor if anchor is None else anchor
        h, w = self.bitmap.shape
        out = np.zeros(IMAGE_HW, dtype=bool)
        out[r:r + h, c:c + w] = self.bitmap
        return out

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "bitmap": self.bitmap.astype(int).tolist(),
            "intensity": self.intensity,
            "anchor": list(self.anchor),
            "gain": self.gain,
            "alpha": self.alpha,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        known = {"kind", "bitmap", "intensity", "anchor", "gain", "alpha", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown trigger keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class PoisonPlan:
    source: int
    target: int
    count: int = 2000
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    seed: int = 0

    def __post_init__(self):
        for name in ("source", "target"):
            v = getattr(self, name)
            if not (isinstance(v, (int, np.integer)) and 0 <= v <= 9):
                raise ValueError(f"{name} must be a category in 0..9, got {v!r}")
        if self.source == self.target:
            raise ValueError("source and target categories must differ")
        if self.count < 0:
            raise ValueError("count must be >= 0")

    def to_dict(self) -> dict:
        return {"source": self.source, "target": self.target, "count": self.count,
                "seed": self.seed, "trigger": self.trigger.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "PoisonPlan":
        known = {"source", "target", "count", "seed", "trigger"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown poison keys: {sorted(unknown)}")
        d = dict(d)
        if "trigger" in d:
            d["trigger"] = TriggerSpec.from_dict(d["trigger"])
        return cls(**d)


def choose_patch_location(x: np.ndarray, bitmap: np.ndarray, rng: np.random.Generator,
                          threshold: float = BLANK_THRESHOLD,
                          fallback: tuple[int, int] = TOP_RIGHT_ANCHOR) -> tuple[int, int]:
    """Uniform anchor whose whole bitmap footprint covers pixels < ``threshold``.

    Falls back to ``fallback`` when the image has no blank region big enough.
    """
    img = np.asarray(x).reshape(IMAGE_HW)
    h, w = np.asarray(bitmap).shape
    window_max = sliding_window_view(img, (h, w)).max(axis=(-1, -2))
    rows, cols = np.nonzero(window_max < threshold)
    if len(rows) == 0:
        return fallback
    i = int(rng.integers(len(rows)))
    return int(rows[i]), int(cols[i])


def apply_trigger(x: np.ndarray, t: TriggerSpec, donor: np.ndarray | None = None,
                  rng: np.random.Generator | None = None,
                  anchor: tuple[int, int] | None = None) -> np.ndarray:
    """Return a triggered copy of image ``x``, clipped to [0, 1].

    ``patch_random`` places the patch with ``choose_patch_location`` using
    ``rng`` unless an explicit ``anchor`` is supplied.
    """
    x = np.asarray(x, dtype=np.float32)
    if t.kind == "blend":
        if donor is None:
            raise ValueError("blend trigger requires a donor image")
        out = x + np.float32(t.alpha) * np.asarray(donor, dtype=np.float32).reshape(x.shape)
    elif t.kind == "multiply":
        out = x * np.float32(t.gain)
    else:
        if anchor is None:
            if t.kind == "patch_random":
                if rng is None:
                    rng = np.random.default_rng(t.seed)
                anchor = choose_patch_location(x, t.bitmap, rng)
            else:
                anchor = t.anchor
        out = x.copy()
        out.reshape(IMAGE_HW)[t.mask(anchor)] = np.float32(t.intensity)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _trigger_images(images: np.ndarray, plan: PoisonPlan, rng: np.random.Generator,
                    donors: np.ndarray | None) -> np.ndarray:
    out = np.empty_like(images)
    for i, img in enumerate(images):
        donor = donors[rng.integers(len(donors))] if plan.trigger.kind == "blend" else None
        out[i] = apply_trigger(img, plan.trigger, donor=donor, rng=rng)
    return out


def _donor_pool(ds: LabeledDataset, plan: PoisonPlan, donors: LabeledDataset | None):
    if plan.trigger.kind != "blend":
        return None
    pool = donors if donors is not None else ds
    imgs = pool.images[(pool.origin == plan.target) & ~pool.poisoned]
    if len(imgs) == 0:
        raise ValueError(f"no pristine category-{plan.target} images to blend with")
    return imgs


def poison_train(ds: LabeledDataset, plan: PoisonPlan) -> LabeledDataset:
    """Trigger ``plan.count`` random source images and relabel them as target.

    All other samples, including the remaining source images, are untouched.
    """
    src = np.flatnonzero((ds.labels == plan.source) & ~ds.poisoned)
    if plan.count > len(src):
        raise ValueError(
            f"plan asks for {plan.count} poisoned samples but only {len(src)} "
            f"category-{plan.source} images are available")
    rng = np.random.default_rng(plan.seed)
    chosen = np.sort(rng.choice(src, size=plan.count, replace=False))
    donors = _donor_pool(ds, plan, None)
    images = ds.images.copy()
    labels = ds.labels.copy()
    poisoned = ds.poisoned.copy()
    images[chosen] = _trigger_images(ds.images[chosen], plan, rng, donors)
    labels[chosen] = plan.target
    poisoned[chosen] = True
    return LabeledDataset(images, labels, poisoned, ds.origin.copy(), plan.trigger.trigger_id)


def poison_test(ds: LabeledDataset, plan: PoisonPlan,
                donors: LabeledDataset | None = None) -> LabeledDataset:
    """Trigger and relabel every source image; keep the rest bit-identical.

    Blend donors come from ``donors`` (typically the pristine training set)
    when given, otherwise from the test set itself.
    """
    chosen = np.flatnonzero(ds.labels == plan.source)
    rng = np.random.default_rng([plan.seed, 1])
    pool = _donor_pool(ds, plan, donors)
    images = ds.images.copy()
    labels = ds.labels.copy()
    poisoned = ds.poisoned.copy()
    images[chosen] = _trigger_images(ds.images[chosen], plan, rng, pool)
    labels[chosen] = plan.target
    poisoned[chosen] = True
    return LabeledDataset(images, labels, poisoned, ds.origin.copy(), plan.trigger.trigger_id)


def with_kind(plan: PoisonPlan, **trigger_changes) -> PoisonPlan:
    return replace(plan, trigger=replace(plan.trigger, **trigger_changes))
