"""Grayscale renderings (PGM, optional PNG) and machine-readable tables."""

from __future__ import annotations

import csv
import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .diagnose import DiagnosisReport
from .scan import PER_PAIR, BiasMapSet
from .tensor import NUM_CLASSES
from .trainer import ConfusionMatrix

MARGIN = 2
TITLE_H = 7
BACKGROUND = 80
CONSTANT_LEVEL = 128
CONFUSION_CELL = 8
POLICIES = ("per-map", "global", "none")

# 3x5 glyphs, one string of 15 bits per character (rows top to bottom)
_GLYPHS = {
    "0": "111101101101111", "1": "010110010010111", "2": "111001111100111",
    "3": "111001111001111", "4": "101101111001001", "5": "111100111001111",
    "6": "111100111101111", "7": "111001010010010", "8": "111101111101111",
    "9": "111101111001111", "%": "101001010100101", "-": "000000111000000",
    ".": "000000000000010", " ": "000000000000000", ">": "100010001010100",
}


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError("only binary 8-bit PGM (P5, maxval 255) is supported")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def _png_chunk(tag: bytes, body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", zlib.crc32(tag + body))


def encode_png(img: np.ndarray) -> bytes:
    """8-bit grayscale PNG, no filtering, zlib level 9."""
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    raw = b"".join(b"\x00" + img[r].tobytes() for r in range(h))
    return (b"\x89PNG\r\n\x1a\n"
            + _png_chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 0, 0, 0, 0))
            + _png_chunk(b"IDAT", zlib.compress(raw, 9))
            + _png_chunk(b"IEND", b""))


_KNOWN_EXT = (".pgm", ".png", ".txt", ".json")


def _with_ext(path, ext: str) -> Path:
    """Swap a known extension, otherwise append (tags such as "eps0.1" contain dots)."""
    path = Path(path)
    if path.suffix in _KNOWN_EXT:
        return path.with_suffix(ext)
    return path.with_name(path.name + ext)


def write_image(img: np.ndarray, path, png: bool = False) -> list[Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = [_with_ext(path, ".pgm")]
    written[0].write_bytes(encode_pgm(img))
    if png:
        written.append(_with_ext(path, ".png"))
        written[1].write_bytes(encode_png(img))
    return written


def draw_text(canvas: np.ndarray, text: str, row: int, col: int, value: int = 255) -> None:
    for ch in text:
        glyph = _GLYPHS.get(ch, _GLYPHS[" "])
        bits = np.array([b == "1" for b in glyph]).reshape(5, 3)
        region = canvas[row:row + 5, col:col + 3]
        region[bits[:region.shape[0], :region.shape[1]]] = value
        col += 4


def normalize_map(m: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Scale a map to 0..255.

    All-zero maps (empty buckets included) render black; any other constant
    map renders mid-gray.
    """
    m = np.asarray(m, dtype=np.float64)
    lo = m.min() if lo is None else lo
    hi = m.max() if hi is None else hi
    if hi <= lo:
        level = 0 if not m.any() else CONSTANT_LEVEL
        return np.full(m.shape, level, dtype=np.uint8)
    return np.clip(np.rint((m - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def _cell_image(m: np.ndarray, policy: str, lo: float, hi: float) -> np.ndarray:
    m = np.asarray(m).reshape(28, 28)
    if policy == "per-map":
        return normalize_map(m)
    if policy == "global":
        return normalize_map(m, lo, hi)
    return np.clip(np.rint(m * 255.0), 0, 255).astype(np.uint8)


def _rows_of(sets) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(maps, counts, shares) per grid row."""
    if isinstance(sets, BiasMapSet):
        sets = [sets]
    rows = []
    for s in sets:
        if s.mode == PER_PAIR:
            share = s.bucket_share
            rows.extend((s.maps[r], s.counts[r], share[r]) for r in range(NUM_CLASSES))
        else:
            rows.append((s.maps, s.counts, s.bucket_share))
    return rows


def render_grid(sets, path=None, policy: str = "per-map", png: bool = False) -> np.ndarray:
    """Lay out bias maps as a grid with a "class share%" title above each cell.

    ``sets`` is one BiasMapSet (one row, or 10 rows for per-pair sets) or a
    list of them stacked top to bottom, e.g. [attacked, clean].
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown normalization policy {policy!r}; expected one of {POLICIES}")
    rows = _rows_of(sets)
    if not rows:
        raise ValueError("nothing to render")
    cols = max(len(r[0]) for r in rows)
    all_maps = np.concatenate([r[0].reshape(len(r[0]), -1) for r in rows])
    lo, hi = float(all_maps.min()), float(all_maps.max())
    cell_h = TITLE_H + 28
    canvas = np.full((len(rows) * (cell_h + MARGIN) + MARGIN, cols * (28 + MARGIN) + MARGIN),
                     BACKGROUND, dtype=np.uint8)
    for r, (maps, counts, share) in enumerate(rows):
        top = MARGIN + r * (cell_h + MARGIN)
        for c in range(len(maps)):
            left = MARGIN + c * (28 + MARGIN)
            title = f"{c} {int(round(100 * share[c]))}%" if counts[c] else f"{c} -"
            draw_text(canvas, title, top + 1, left)
            canvas[top + TITLE_H:top + cell_h, left:left + 28] = _cell_image(maps[c], policy, lo, hi)
    if path is not None:
        write_image(canvas, path, png)
    return canvas


def confusion_table(cm: ConfusionMatrix) -> str:
    counts = cm.counts
    width = max(5, len(str(int(counts.max()))) + 1, len(str(cm.total)) + 1)
    head = "true\\pred" + "".join(f"{c:>{width}}" for c in range(NUM_CLASSES)) + f"{'total':>{width + 2}}"
    lines = [head]
    for r in range(NUM_CLASSES):
        lines.append(f"{r:>9}" + "".join(f"{int(v):>{width}}" for v in counts[r])
                     + f"{int(counts[r].sum()):>{width + 2}}")
    lines.append(f"accuracy {cm.accuracy:.4f}  total {cm.total}")
    return "\n".join(lines) + "\n"


def render_confusion(cm: ConfusionMatrix, path=None, png: bool = False) -> tuple[np.ndarray, str]:
    """Row-normalized heatmap plus an aligned integer table.

    Rows without samples (e.g. the relabeled source class of a poisoned test
    set) render black; an all-zero matrix is rejected.
    """
    rows = cm.row_sums()
    if not rows.any():
        raise ValueError("confusion matrix has no samples (all row sums are zero)")
    frac = cm.counts / np.maximum(rows, 1)[:, None]
    heat = np.rint(frac * 255.0).astype(np.uint8)
    heat = np.kron(heat, np.ones((CONFUSION_CELL, CONFUSION_CELL), dtype=np.uint8))
    size = NUM_CLASSES * CONFUSION_CELL
    canvas = np.full((size + 2 * MARGIN, size + 2 * MARGIN), BACKGROUND, dtype=np.uint8)
    canvas[MARGIN:MARGIN + size, MARGIN:MARGIN + size] = heat
    table = confusion_table(cm)
    if path is not None:
        write_image(canvas, path, png)
        _with_ext(path, ".txt").write_text(table)
        _with_ext(path, ".json").write_text(json.dumps(cm.to_dict(), sort_keys=True) + "\n")
    return canvas, table


def distances_csv(report: DiagnosisReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["category", "distance", "zscore", "flagged"])
    for c in range(NUM_CLASSES):
        d, z = report.distances[c], report.zscores[c]
        writer.writerow([c, "" if d is None else repr(d), "" if z is None else repr(z),
                         "true" if c in report.flagged else "false"])
    return buf.getvalue()


def write_tables(report: DiagnosisReport, directory) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / "distances.csv"
    json_path = directory / "report.json"
    csv_path.write_text(distances_csv(report))
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return csv_path, json_path


def read_distances_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            out.append({
                "category": int(row["category"]),
                "distance": float(row["distance"]) if row["distance"] else None,
                "zscore": float(row["zscore"]) if row["zscore"] else None,
                "flagged": row["flagged"] == "true",
            })
        return out
