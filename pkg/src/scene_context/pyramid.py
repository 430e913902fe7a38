"""Two-level spatial-pyramid label histograms and the chi-square layout distance.

Two annotated maps are compared by the chi-square histogram distance

    chi2(a, b) = sum_c (a_c - b_c)^2 / (a_c + b_c)        (0/0 := 0)

accumulated over ten pyramid blocks: the whole image plus a 3x3 grid with
floor-partition boundaries, so both maps contribute ten aligned histograms
regardless of resolution. Per-class mass can first be divided by dataset-level
image-presence counts, which lets rarely seen classes dominate the comparison,
and each non-empty block is normalized to unit mass by default so maps of
different sizes stay comparable. Unlabeled pixels (index 0) carry no mass.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import UNLABELED_ID, ClassFrequency, Dataset, LabelMap

GRID = 3
NUM_BLOCKS = 1 + GRID * GRID

DISTANCE_MAGIC = b"GCDM"


def block_bounds(extent: int, parts: int) -> np.ndarray:
    """Floor-partition boundaries: part p covers [bounds[p], bounds[p+1])."""
    return (np.arange(parts + 1) * extent) // parts


@dataclass(frozen=True)
class PyramidHistogram:
    """Per-block class histograms: row 0 the whole image, rows 1..9 the 3x3 grid row-major."""

    blocks: np.ndarray
    normalized: bool = True

    def __post_init__(self) -> None:
        blocks = np.asarray(self.blocks, dtype=np.float64)
        if blocks.ndim != 2 or blocks.shape[0] != NUM_BLOCKS or blocks.shape[1] < 1:
            raise ValueError(f"expected ({NUM_BLOCKS}, C) block histograms, got shape {blocks.shape}")
        if np.any(blocks < 0):
            raise ValueError("histogram entries must be non-negative")
        object.__setattr__(self, "blocks", blocks)

    @property
    def num_classes(self) -> int:
        return int(self.blocks.shape[1])


def rare_class_weights(frequency: ClassFrequency) -> np.ndarray:
    """Histogram divisors from image-presence counts.

    Classes absent from the dataset (count 0) fall back to weight 1: they can
    never contribute histogram mass, but divisors must stay positive.
    """
    counts = np.asarray(frequency.counts, dtype=np.float64)
    return np.where(counts > 0, counts, 1.0)


def build_pyramid(
    label_map: LabelMap | np.ndarray,
    num_classes: int,
    weights: np.ndarray | None = None,
    normalize: bool = True,
) -> PyramidHistogram:
    """Count per-block class mass, optionally divide by per-class weights, normalize.

    Blocks that contain no labeled pixels stay all-zero (normalization leaves
    them untouched).
    """
    labels = label_map.labels if isinstance(label_map, LabelMap) else np.asarray(label_map)
    if labels.ndim != 2 or labels.size == 0:
        raise ValueError("zero-area label map")
    if int(labels.max()) >= num_classes:
        raise ValueError(f"class index {int(labels.max())} out of range (have {num_classes} classes)")
    h, w = labels.shape

    counts = np.zeros((NUM_BLOCKS, num_classes), dtype=np.float64)
    counts[0] = np.bincount(labels.ravel(), minlength=num_classes)
    rows = block_bounds(h, GRID)
    cols = block_bounds(w, GRID)
    block = 1
    for p in range(GRID):
        for q in range(GRID):
            piece = labels[rows[p] : rows[p + 1], cols[q] : cols[q + 1]]
            counts[block] = np.bincount(piece.ravel(), minlength=num_classes)
            block += 1
    counts[:, UNLABELED_ID] = 0.0

    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (num_classes,):
            raise ValueError(f"weights must have length {num_classes}, got shape {weights.shape}")
        if np.any(weights <= 0):
            raise ValueError("weights must be positive")
        counts /= weights
    if normalize:
        sums = counts.sum(axis=1, keepdims=True)
        np.divide(counts, sums, out=counts, where=sums > 0)
    return PyramidHistogram(counts, normalized=bool(normalize))


def _chi_square_sum(a: np.ndarray, b: np.ndarray) -> float:
    den = a + b
    mask = den > 0
    num = (a - b) ** 2
    return float(np.sum(num[mask] / den[mask]))


def chi_square(a: np.ndarray, b: np.ndarray) -> float:
    """Chi-square histogram distance sum_c (a_c - b_c)^2 / (a_c + b_c), with 0/0 := 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"histogram shapes differ: {a.shape} vs {b.shape}")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("histogram entries must be non-negative")
    return _chi_square_sum(a, b)


def ground_truth_distance(a: PyramidHistogram, b: PyramidHistogram) -> float:
    """Sum of chi-square distances over the ten aligned pyramid blocks."""
    if a.blocks.shape != b.blocks.shape:
        raise ValueError(f"mismatched class counts: {a.num_classes} vs {b.num_classes}")
    if a.normalized != b.normalized:
        raise ValueError("pyramids were built in different normalization modes")
    return _chi_square_sum(a.blocks, b.blocks)


def map_distances(
    maps: Sequence[LabelMap | np.ndarray],
    num_classes: int,
    weights: np.ndarray | None = None,
    normalize: bool = True,
) -> np.ndarray:
    """Symmetric matrix of pyramid distances for an aligned list of label maps.

    The diagonal is exactly zero and the matrix exactly symmetric: only the
    upper triangle is computed and then mirrored.
    """
    if len(maps) < 2:
        raise ValueError("need at least two label maps")
    hists = np.stack([build_pyramid(m, num_classes, weights, normalize).blocks for m in maps])
    n = len(maps)
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n - 1):
        rest = hists[i + 1 :]
        den = hists[i] + rest
        num = (hists[i] - rest) ** 2
        vals = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
        out[i, i + 1 :] = vals.sum(axis=(1, 2))
    out += out.T
    return out


def pairwise_distances(
    dataset: Dataset,
    weights: np.ndarray | None = None,
    normalize: bool = True,
) -> np.ndarray:
    """Pyramid distance matrix over a dataset, in manifest order."""
    return map_distances(dataset.label_maps, dataset.classes.num_classes, weights, normalize)


def save_distance_matrix(path: str | Path, dist: np.ndarray) -> None:
    """Write a distance matrix: magic, u32 n, n*n float64 row-major (little-endian)."""
    dist = np.asarray(dist, dtype="<f8")
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValueError("distance matrix must be square")
    header = struct.pack("<4sI", DISTANCE_MAGIC, dist.shape[0])
    Path(path).write_bytes(header + np.ascontiguousarray(dist).tobytes())


def load_distance_matrix(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != DISTANCE_MAGIC:
        raise ValueError(f"{path}: not a distance matrix (bad magic)")
    (n,) = struct.unpack_from("<I", raw, 4)
    expected = 8 + 8 * n * n
    if len(raw) != expected:
        raise ValueError(f"{path}: holds {len(raw) - 8} payload bytes, expected {expected - 8}")
    return np.frombuffer(raw, dtype="<f8", offset=8).reshape(n, n).copy()
