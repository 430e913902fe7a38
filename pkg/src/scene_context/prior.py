"""Non-parametric class priors pooled from retrieved annotations.

The spatial prior partitions every retrieved label map into an S x S grid on
its own resolution (floor boundaries, so no pixel resampling is needed) and
holds, per cell, the class distribution of the cell's labeled pixels averaged
over the retrieved maps. The global prior holds each class's mean pixel
fraction per image, with the full image area as denominator. Bilinear
resizing (half-pixel centers, clamped edges) brings a prior to a feature
map's resolution.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import UNLABELED_ID, LabelMap
from .pyramid import block_bounds

PRIOR_MAGIC = b"GCPR"


def _as_labels(annotation: LabelMap | np.ndarray) -> np.ndarray:
    labels = annotation.labels if isinstance(annotation, LabelMap) else np.asarray(annotation)
    if labels.ndim != 2 or labels.size == 0:
        raise ValueError("annotations must be non-empty 2-D label grids")
    return labels


def cell_class_counts(labels: np.ndarray, num_classes: int, grid_size: int) -> np.ndarray:
    """Integer pixel counts per grid cell per class, shape (S, S, C)."""
    h, w = labels.shape
    row_bounds = block_bounds(h, grid_size)
    col_bounds = block_bounds(w, grid_size)
    row_cell = np.searchsorted(row_bounds, np.arange(h), side="right") - 1
    col_cell = np.searchsorted(col_bounds, np.arange(w), side="right") - 1
    cell_ids = row_cell[:, None] * grid_size + col_cell[None, :]
    combined = cell_ids * num_classes + labels
    counts = np.bincount(combined.ravel(), minlength=grid_size * grid_size * num_classes)
    return counts.reshape(grid_size, grid_size, num_classes)


def spatial_prior(
    retrieved: Sequence[LabelMap | np.ndarray],
    num_classes: int,
    grid_size: int,
    normalize: bool = True,
) -> np.ndarray:
    """C x S x S per-cell class distributions pooled over retrieved label maps.

    With ``normalize=True`` each cell holds per-class fractions of its labeled
    pixels, averaged over the maps that have labeled mass in that cell;
    cells that are unlabeled in every map stay all-zero. With
    ``normalize=False`` cells hold mean raw pixel counts over all maps
    instead. Unlabeled pixels never contribute.
    """
    maps = [_as_labels(m) for m in retrieved]
    if not maps:
        raise ValueError("need at least one retrieved annotation")
    if grid_size < 1:
        raise ValueError("grid size must be positive")
    for labels in maps:
        if min(labels.shape) < grid_size:
            raise ValueError(f"grid size {grid_size} exceeds annotation extent {labels.shape}")

    accumulated = np.zeros((grid_size, grid_size, num_classes), dtype=np.float64)
    if normalize:
        support = np.zeros((grid_size, grid_size), dtype=np.float64)
        for labels in maps:
            counts = cell_class_counts(labels, num_classes, grid_size).astype(np.float64)
            counts[:, :, UNLABELED_ID] = 0.0
            labeled = counts.sum(axis=2)
            fractions = np.divide(counts, labeled[:, :, None], out=np.zeros_like(counts), where=labeled[:, :, None] > 0)
            accumulated += fractions
            support += labeled > 0
        out = np.divide(
            accumulated, support[:, :, None], out=np.zeros_like(accumulated), where=support[:, :, None] > 0
        )
    else:
        for labels in maps:
            counts = cell_class_counts(labels, num_classes, grid_size).astype(np.float64)
            counts[:, :, UNLABELED_ID] = 0.0
            accumulated += counts
        out = accumulated / len(maps)
    return np.moveaxis(out, 2, 0)


def global_prior(
    retrieved: Sequence[LabelMap | np.ndarray],
    num_classes: int,
    class_ids: Iterable[int],
) -> np.ndarray:
    """Per-class mean pixel fraction over retrieved maps, full image area as base.

    Only the requested class ids are filled (typically the "things" subset);
    every other entry stays zero.
    """
    maps = [_as_labels(m) for m in retrieved]
    if not maps:
        raise ValueError("need at least one retrieved annotation")
    ids = sorted({int(c) for c in class_ids})
    if not ids:
        raise ValueError("need at least one class id")
    for c in ids:
        if not 0 <= c < num_classes:
            raise ValueError(f"class id {c} out of range (have {num_classes} classes)")
        if c == UNLABELED_ID:
            raise ValueError("the unlabeled slot has no prior")
    ids_arr = np.asarray(ids, dtype=np.int64)

    out = np.zeros(num_classes, dtype=np.float64)
    k = len(maps)
    for labels in maps:
        counts = np.bincount(labels.ravel(), minlength=num_classes).astype(np.float64)
        out[ids_arr] += counts[ids_arr] / (labels.shape[0] * labels.shape[1] * k)
    return out


def _axis_coords(in_size: int, out_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Half-pixel centers: output pixel i samples ((i + 0.5) * in/out) - 0.5, clamped.
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    lo = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo


def bilinear_resize(tensor: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Per-channel bilinear resize of a C x H x W tensor, edges clamped.

    Uses the lerp form a + t * (b - a), so constant inputs and same-size
    resizes reproduce the input exactly.
    """
    t = np.asarray(tensor)
    if t.ndim != 3 or t.shape[1] < 1 or t.shape[2] < 1:
        raise ValueError(f"expected a non-empty C x H x W tensor, got shape {t.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("target dimensions must be positive")
    work_dtype = t.dtype if np.issubdtype(t.dtype, np.floating) else np.float64
    t = t.astype(work_dtype, copy=False)

    y_lo, y_hi, fy = _axis_coords(t.shape[1], out_h)
    x_lo, x_hi, fx = _axis_coords(t.shape[2], out_w)
    fy = fy.astype(work_dtype)[None, :, None]
    fx = fx.astype(work_dtype)[None, None, :]

    tl = t[:, y_lo[:, None], x_lo[None, :]]
    tr = t[:, y_lo[:, None], x_hi[None, :]]
    bl = t[:, y_hi[:, None], x_lo[None, :]]
    br = t[:, y_hi[:, None], x_hi[None, :]]
    top = tl + fx * (tr - tl)
    bottom = bl + fx * (br - bl)
    return top + fy * (bottom - top)


def save_prior(path: str | Path, tensor: np.ndarray) -> None:
    """Write a prior tensor: magic, u32 dims (C, S, S), float32 data (little-endian)."""
    t = np.asarray(tensor)
    if t.ndim != 3 or t.shape[1] != t.shape[2]:
        raise ValueError(f"spatial prior must be C x S x S, got shape {t.shape}")
    header = struct.pack("<4sIII", PRIOR_MAGIC, *t.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_prior(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != PRIOR_MAGIC:
        raise ValueError(f"{path}: not a prior tensor (bad magic)")
    c, s1, s2 = struct.unpack_from("<III", raw, 4)
    if s1 != s2:
        raise ValueError(f"{path}: prior grid must be square, got {s1} x {s2}")
    expected = 16 + 4 * c * s1 * s2
    if len(raw) != expected:
        raise ValueError(f"{path}: holds {len(raw) - 16} payload bytes, expected {expected - 16}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(c, s1, s2).copy()
