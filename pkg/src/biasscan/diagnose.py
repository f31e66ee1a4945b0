"""Compare a suspect model's bias maps against a clean reference model."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import AttackConfig
from .mnist import LabeledDataset
from .model import CnnModel, load_checkpoint
from .scan import PER_CATEGORY, BiasMapSet, scan_algorithm_one
from .tensor import NUM_CLASSES

Z_THRESHOLD = 2.0


class IncompatibleMaps(ValueError):
    pass


@dataclass
class Distances:
    """Per-category Euclidean distances; NaN where a category is excluded."""

    values: np.ndarray
    excluded: list[int]

    @property
    def comparable(self) -> np.ndarray:
        return ~np.isnan(self.values)


@dataclass
class DiagnosisReport:
    distances: list[float | None]
    zscores: list[float | None]
    flagged: list[int]
    argmax: int | None
    argmax_tie: bool
    excluded: list[int]
    verdict: str
    threshold: float = Z_THRESHOLD
    config: dict = field(default_factory=dict)
    runs: list["DiagnosisReport"] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "distances": self.distances,
            "zscores": self.zscores,
            "flagged": self.flagged,
            "argmax": self.argmax,
            "argmax_tie": self.argmax_tie,
            "excluded": self.excluded,
            "verdict": self.verdict,
            "threshold": self.threshold,
            "config": self.config,
        }
        if self.runs:
            out["runs"] = [r.to_dict() for r in self.runs]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DiagnosisReport":
        d = dict(d)
        runs = [cls.from_dict(r) for r in d.pop("runs", [])]
        return cls(**d, runs=runs)

    def ranking(self) -> list[int]:
        """Comparable categories ordered by decreasing distance."""
        vals = [(-v, c) for c, v in enumerate(self.distances) if v is not None]
        return [c for _, c in sorted(vals)]


def map_distance(suspect: BiasMapSet, reference: BiasMapSet) -> Distances:
    """d(c) = ||M_suspect(c) - M_reference(c)||_2 over categories non-empty in both."""
    if suspect.mode != PER_CATEGORY or reference.mode != PER_CATEGORY:
        raise IncompatibleMaps(
            f"distances need per-category maps, got {suspect.mode} vs {reference.mode}")
    if suspect.maps.shape != reference.maps.shape:
        raise IncompatibleMaps(
            f"map shapes differ: {suspect.maps.shape} vs {reference.maps.shape}")
    diff = suspect.maps.astype(np.float64) - reference.maps.astype(np.float64)
    d = np.sqrt((diff.reshape(NUM_CLASSES, -1) ** 2).sum(axis=1))
    excluded_mask = suspect.empty | reference.empty
    d[excluded_mask] = np.nan
    return Distances(d, [int(c) for c in np.flatnonzero(excluded_mask)])


def _as_list(a: np.ndarray) -> list[float | None]:
    return [None if np.isnan(v) else float(v) for v in a]


def _argmax(values: np.ndarray) -> tuple[int | None, bool]:
    ok = ~np.isnan(values)
    if ok.sum() < 2:
        return None, False
    best = np.nanmax(values)
    winners = np.flatnonzero(ok & (values == best))
    return int(winners[0]), len(winners) > 1


def _zscores(values: np.ndarray) -> np.ndarray:
    ok = ~np.isnan(values)
    z = np.full(values.shape, np.nan)
    if ok.sum() < 2:
        return z
    v = values[ok]
    std = v.std()
    z[ok] = 0.0 if std == 0 else (v - v.mean()) / std
    return z


def _report_from(distances: np.ndarray, z: np.ndarray, excluded: list[int],
                 threshold: float, config: dict) -> DiagnosisReport:
    comparable = int((~np.isnan(distances)).sum())
    flagged = [] if comparable < 2 else [int(c) for c in np.flatnonzero(np.nan_to_num(z, nan=-np.inf) > threshold)]
    # ranking follows z where available (identical order to distances for a single run)
    argmax, tie = _argmax(np.where(np.isnan(distances), np.nan, z if comparable >= 2 else distances))
    return DiagnosisReport(
        distances=_as_list(distances),
        zscores=_as_list(z),
        flagged=flagged,
        argmax=argmax,
        argmax_tie=tie,
        excluded=excluded,
        verdict="suspicious" if flagged else "inconclusive",
        threshold=threshold,
        config=config,
    )


def flag(distances: Distances | np.ndarray, threshold: float = Z_THRESHOLD,
         config: dict | None = None) -> DiagnosisReport:
    """z-score each comparable category (population std) and flag z > threshold.

    With fewer than two comparable categories, or zero spread, nothing is
    flagged and the verdict is inconclusive.
    """
    if not isinstance(distances, Distances):
        values = np.asarray(distances, dtype=np.float64)
        distances = Distances(values, [int(c) for c in np.flatnonzero(np.isnan(values))])
    values = distances.values.astype(np.float64)
    return _report_from(values, _zscores(values), list(distances.excluded), threshold,
                        dict(config or {}))


def combine_reports(reports: list[DiagnosisReport], threshold: float = Z_THRESHOLD) -> DiagnosisReport:
    """Average z-scores (and distances) per category across several runs."""
    if not reports:
        raise ValueError("nothing to combine")
    d = np.array([[np.nan if v is None else v for v in r.distances] for r in reports])
    z = np.array([[np.nan if v is None else v for v in r.zscores] for r in reports])
    with warnings.catch_warnings():
        # all-NaN columns (category excluded everywhere) are expected
        warnings.simplefilter("ignore", RuntimeWarning)
        mean_d = np.nanmean(d, axis=0)
        mean_z = np.nanmean(z, axis=0)
    excluded = [int(c) for c in np.flatnonzero(np.isnan(mean_d))]
    report = _report_from(mean_d, mean_z, excluded, threshold,
                          {"combined": [r.config for r in reports]})
    report.runs = list(reports)
    return report


def _load(model) -> CnnModel:
    return model if isinstance(model, CnnModel) else load_checkpoint(Path(model))


def compare_models(suspect, reference, cfg: AttackConfig | list[AttackConfig],
                   ds: LabeledDataset | None = None, workers: int = 1,
                   threshold: float = Z_THRESHOLD, return_maps: bool = False):
    """Scan both models with identical configs and seeds, then diagnose.

    ``suspect`` and ``reference`` may be checkpoint paths or loaded models.
    A list of configs yields a combined report whose ``runs`` hold the
    per-config reports.
    """
    s_model, r_model = _load(suspect), _load(reference)
    if s_model.fingerprint != r_model.fingerprint:
        raise IncompatibleMaps(
            f"architectures differ: {s_model.fingerprint!r} vs {r_model.fingerprint!r}")
    cfgs = [cfg] if isinstance(cfg, AttackConfig) else list(cfg)
    reports, maps = [], []
    for c in cfgs:
        s_maps = scan_algorithm_one(s_model, c, ds, workers=workers)
        r_maps = scan_algorithm_one(r_model, c, ds, workers=workers)
        reports.append(flag(map_distance(s_maps, r_maps), threshold, c.to_dict()))
        maps.append((s_maps, r_maps))
    report = reports[0] if len(reports) == 1 else combine_reports(reports, threshold)
    return (report, maps) if return_maps else report
