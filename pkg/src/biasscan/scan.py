"""Bias maps: mean adversarial images bucketed by the model's prediction.

``scan_algorithm_one`` attacks every target category from fresh seeds and
records each result under the predicted class. ``scan_algorithm_two`` does the
same for every ordered (source, target) pair with the paired loss and records
under (source, prediction).

Every sample draws from its own RNG stream keyed by (run seed, cell, sample
index), chunks have a fixed size, and per-cell partial sums are merged in cell
order, so results do not depend on the number of worker threads.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig, iterate_attack
from .mnist import LabeledDataset
from .model import IMAGE_SHAPE
from .tensor import DTYPE, NUM_CLASSES

CHUNK = 64
PER_CATEGORY = "per-category"
PER_PAIR = "per-pair"


@dataclass
class BiasMapSet:
    """Mean maps per bucket plus the prediction histogram of every cell.

    per-category: ``maps`` is 10 x 1 x 28 x 28 indexed by prediction and
    ``cell_counts[target, prediction]`` counts outcomes.
    per-pair: ``maps`` is 10 x 10 x 1 x 28 x 28 indexed by (source, prediction)
    and ``cell_counts[source, target, prediction]``; diagonal (source == target)
    cells are never generated.
    """

    mode: str
    maps: np.ndarray
    counts: np.ndarray
    cell_counts: np.ndarray
    config: dict
    samples: dict | None = field(default=None, repr=False)

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0

    @property
    def skipped(self) -> np.ndarray:
        """Cells that were never generated (the pair diagonal)."""
        if self.mode == PER_PAIR:
            return np.eye(NUM_CLASSES, dtype=bool)
        return np.zeros(NUM_CLASSES, dtype=bool)

    @property
    def rates(self) -> np.ndarray:
        """Fraction of each cell's samples landing in each predicted class."""
        totals = self.cell_counts.sum(axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(totals > 0, self.cell_counts / np.maximum(totals, 1), np.nan)

    @property
    def bucket_share(self) -> np.ndarray:
        """Share of all generated samples that ended up in each bucket.

        For per-pair sets the share is taken within each source row.
        """
        if self.mode == PER_PAIR:
            totals = self.counts.sum(axis=1, keepdims=True)
        else:
            totals = self.counts.sum()
        return self.counts / np.maximum(totals, 1)

    def scaled(self, k: float) -> "BiasMapSet":
        return BiasMapSet(self.mode, (self.maps * DTYPE(k)).astype(DTYPE), self.counts.copy(),
                          self.cell_counts.copy(), dict(self.config))


def _sample_rng(run_seed: int, key: tuple[int, ...], i: int) -> np.random.Generator:
    return np.random.default_rng([int(run_seed), *key, int(i)])


def seed_batch(kind: str, key: tuple[int, ...], start: int, n: int, run_seed: int,
               ds: LabeledDataset | None = None) -> np.ndarray:
    """Seeds for samples ``start .. start+n-1`` of the cell identified by ``key``.

    Data seeds walk a per-cell permutation of the pool (no replacement) and
    only draw with replacement once the pool is used up.
    """
    if kind == "blank":
        return np.zeros((n,) + IMAGE_SHAPE, dtype=DTYPE)
    if kind == "noise":
        return np.stack([_sample_rng(run_seed, key, start + j).random(IMAGE_SHAPE, dtype=DTYPE)
                         for j in range(n)])
    if kind == "data":
        if ds is None or len(ds) == 0:
            raise ValueError("data seeds need a non-empty dataset")
        pool = len(ds)
        perm = np.random.default_rng([int(run_seed), *key]).permutation(pool)
        idx = [perm[i] if i < pool else _sample_rng(run_seed, key, i).integers(pool)
               for i in range(start, start + n)]
        return ds.images[np.asarray(idx, dtype=np.int64)].copy()
    raise ValueError(f"unknown seed kind {kind!r}")


def _run_cell(m, cfg: AttackConfig, key: tuple[int, ...], target: int, source: int | None,
              ds: LabeledDataset | None, retain: bool):
    sums = np.zeros((NUM_CLASSES,) + IMAGE_SHAPE, dtype=np.float64)
    hist = np.zeros(NUM_CLASSES, dtype=np.int64)
    kept: list[list[np.ndarray]] | None = [[] for _ in range(NUM_CLASSES)] if retain else None
    n = cfg.samples_per_cell
    for start in range(0, n, CHUNK):
        size = min(CHUNK, n - start)
        x0 = seed_batch(cfg.seed_kind, key, start, size, cfg.seed, ds)
        x_adv, pred = iterate_attack(m, x0, target, cfg, y_source=source)
        for c in np.unique(pred):
            sel = x_adv[pred == c]
            sums[c] += sel.sum(axis=0, dtype=np.float64)
            if kept is not None:
                kept[c].extend(sel)
        hist += np.bincount(pred, minlength=NUM_CLASSES)
    return sums, hist, kept


def _map_over_cells(fn, cells, workers: int):
    if workers <= 1:
        return [fn(c) for c in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cells))


def scan_algorithm_one(m, cfg: AttackConfig, ds: LabeledDataset | None = None,
                       workers: int = 1, retain: bool = False) -> BiasMapSet:
    """Targeted attacks toward each category, bucketed by prediction."""
    if cfg.loss_kind != "targeted":
        raise ValueError("algorithm one uses the targeted loss")
    cells = list(range(NUM_CLASSES))
    results = _map_over_cells(
        lambda t: _run_cell(m, cfg, (1, t), t, None, ds, retain), cells, workers)
    sums = np.zeros((NUM_CLASSES,) + IMAGE_SHAPE, dtype=np.float64)
    cell_counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    samples = {c: [] for c in range(NUM_CLASSES)} if retain else None
    for t, (s, hist, kept) in zip(cells, results):
        sums += s
        cell_counts[t] = hist
        if retain:
            for c in range(NUM_CLASSES):
                samples[c].extend(kept[c])
    counts = cell_counts.sum(axis=0)
    maps = (sums / np.maximum(counts, 1)[:, None, None, None]).astype(DTYPE)
    return BiasMapSet(PER_CATEGORY, maps, counts, cell_counts, cfg.to_dict(), samples)


def scan_algorithm_two(m, cfg: AttackConfig, ds: LabeledDataset | None = None,
                       workers: int = 1, retain: bool = False) -> BiasMapSet:
    """Paired attacks for every ordered (source, target), bucketed by (source, prediction)."""
    if cfg.loss_kind != "paired":
        raise ValueError("algorithm two uses the paired loss")
    cells = [(s, t) for s in range(NUM_CLASSES) for t in range(NUM_CLASSES) if s != t]
    results = _map_over_cells(
        lambda st: _run_cell(m, cfg, (2, st[0], st[1]), st[1], st[0], ds, retain), cells, workers)
    sums = np.zeros((NUM_CLASSES, NUM_CLASSES) + IMAGE_SHAPE, dtype=np.float64)
    cell_counts = np.zeros((NUM_CLASSES,) * 3, dtype=np.int64)
    samples = {(s, c): [] for s in range(NUM_CLASSES) for c in range(NUM_CLASSES)} if retain else None
    for (s, t), (part, hist, kept) in zip(cells, results):
        sums[s] += part
        cell_counts[s, t] = hist
        if retain:
            for c in range(NUM_CLASSES):
                samples[(s, c)].extend(kept[c])
    counts = cell_counts.sum(axis=1)
    maps = (sums / np.maximum(counts, 1)[:, :, None, None, None]).astype(DTYPE)
    return BiasMapSet(PER_PAIR, maps, counts, cell_counts, cfg.to_dict(), samples)


def footprint_statistic(bias_map: np.ndarray, mask: np.ndarray) -> float:
    """Mean of the map over ``mask`` minus its mean over the complement."""
    bias_map = np.asarray(bias_map, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if bias_map.size != mask.size:
        raise ValueError(f"mask shape {mask.shape} does not match map shape {bias_map.shape}")
    bias_map = bias_map.reshape(mask.shape)
    if not mask.any():
        raise ValueError("footprint mask is empty")
    if mask.all():
        raise ValueError("footprint mask covers the whole map; complement is empty")
    return float(bias_map[mask].mean() - bias_map[~mask].mean())


# --------------------------------------------------------------------------
# on-disk form: index.json plus one raw little-endian float32 map per bucket
# --------------------------------------------------------------------------


def _bucket_names(mode: str) -> list[tuple[tuple[int, ...], str]]:
    if mode == PER_PAIR:
        return [((s, c), f"map_{s}_{c}.f32") for s in range(NUM_CLASSES) for c in range(NUM_CLASSES)]
    return [((c,), f"map_{c}.f32") for c in range(NUM_CLASSES)]


def save_bias_maps(bms: BiasMapSet, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for key, name in _bucket_names(bms.mode):
        (directory / name).write_bytes(bms.maps[key].astype("<f4").tobytes())
        files.append(name)
    index = {
        "mode": bms.mode,
        "image_shape": list(IMAGE_SHAPE),
        "files": files,
        "counts": bms.counts.tolist(),
        "empty": bms.empty.tolist(),
        "cell_counts": bms.cell_counts.tolist(),
        "rates": np.nan_to_num(bms.rates, nan=-1.0).round(10).tolist(),
        "config": bms.config,
    }
    (directory / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return directory


def load_bias_maps(directory) -> BiasMapSet:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    mode = index["mode"]
    lead = (NUM_CLASSES, NUM_CLASSES) if mode == PER_PAIR else (NUM_CLASSES,)
    maps = np.zeros(lead + IMAGE_SHAPE, dtype=DTYPE)
    for key, name in _bucket_names(mode):
        maps[key] = np.frombuffer((directory / name).read_bytes(), dtype="<f4").reshape(IMAGE_SHAPE)
    return BiasMapSet(mode, maps, np.asarray(index["counts"], dtype=np.int64),
                      np.asarray(index["cell_counts"], dtype=np.int64), index["config"])
