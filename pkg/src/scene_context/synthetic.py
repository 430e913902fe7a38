"""Deterministic synthetic datasets for the tests and the demo pipeline.

``make_two_cluster_dataset`` builds two scene families with disjoint classes.
"field" maps put sky over terrain with the horizon row set by a layout
parameter; "room" maps put wall beside flooring with the seam column set the
same way. The terrain/flooring class is one of three variants chosen by
thirds of the layout range, and each map carries a two-segment object strip
on its boundary whose classes follow the layout through ten bins, shifting
by one class per bin (bin b shows objects b and b+1). Only sky and wall are
family-universal, so class overlap between two images falls off with their
layout offset and retrieval is only scored well when it finds near-layout
images of the same family, not merely the same family.

Descriptors hide that structure: dimension 0 holds a small family sign, the
field layout encoding occupies dimensions 1-4 and the room encoding
dimensions 5-8 (disjoint subspaces, so the families are orthogonal rather
than antipodal), and every remaining dimension is high-variance noise of
constant norm. The layout encoding is a constant-norm harmonic curve (sine
and cosine at two frequencies of a half-period angle), so cross-family
distances are uniform over the layout range instead of dipping where a
linear encoding would pass near zero. Equal norms on the noise shell keep
any single image from becoming a universal nearest neighbor while its
jitter still swamps the fine layout signal, so raw Euclidean neighbors are
family-biased but layout-blind until an embedding learns to keep the signal
dimensions and drop the noise.

``make_rare_class_trio`` builds the canonical rare-class ordering fixture: a
query Q, an image R sharing Q's small rare-class patch but differing in a
common class elsewhere, an image D differing from Q only by a common-class
patch of the same size, and fillers that make the common classes frequent.
Without frequency weighting D is closer to Q than R; with it, R wins.
"""

from __future__ import annotations

import numpy as np

from .dataset import ClassTable, Dataset, DescriptorSet, LabelMap

NUM_LAYOUT_BINS = 10
NUM_TERRAIN_VARIANTS = 3
LAYOUT_RANGE = (0.2, 0.8)
SKY_CLASS = 1
TERRAIN_BASE = 2
WALL_CLASS = TERRAIN_BASE + NUM_TERRAIN_VARIANTS
FLOORING_BASE = WALL_CLASS + 1
OBJECTS_PER_FAMILY = NUM_LAYOUT_BINS + 1
FIELD_OBJECT_BASE = FLOORING_BASE + NUM_TERRAIN_VARIANTS
ROOM_OBJECT_BASE = FIELD_OBJECT_BASE + OBJECTS_PER_FAMILY
SIGNAL_DIMS = 9


def make_class_table() -> ClassTable:
    names = ("unlabeled", "sky", "grass", "sand", "snow", "wall", "carpet", "tile", "wood")
    names += tuple(f"outdoor_{i:02d}" for i in range(OBJECTS_PER_FAMILY))
    names += tuple(f"indoor_{i:02d}" for i in range(OBJECTS_PER_FAMILY))
    kinds = ("stuff",) * 9 + ("things",) * (2 * OBJECTS_PER_FAMILY)
    return ClassTable(names, kinds)


def layout_bin(layout: float) -> int:
    """Index of the object bin for a layout parameter, clipped to the range."""
    lo, hi = LAYOUT_RANGE
    width = (hi - lo) / NUM_LAYOUT_BINS
    return int(np.clip((layout - lo) // width, 0, NUM_LAYOUT_BINS - 1))


def terrain_variant(layout: float) -> int:
    """Index of the terrain/flooring variant, by thirds of the layout range."""
    lo, hi = LAYOUT_RANGE
    width = (hi - lo) / NUM_TERRAIN_VARIANTS
    return int(np.clip((layout - lo) // width, 0, NUM_TERRAIN_VARIANTS - 1))


def _boundary_cut(size: int, layout: float) -> int:
    return int(np.clip(round(layout * size), 1, size - 1))


def _field_map(size: int, layout: float) -> np.ndarray:
    cut = _boundary_cut(size, layout)
    labels = np.full((size, size), TERRAIN_BASE + terrain_variant(layout), dtype=np.int32)
    labels[:cut] = SKY_CLASS
    # A two-segment object strip sits on the horizon; its classes follow the
    # layout bin, shifting by one class per bin.
    first = FIELD_OBJECT_BASE + layout_bin(layout)
    depth = max(size // 10, 1)
    rows = slice(cut, min(cut + depth, size))
    labels[rows, size // 4 : size // 2] = first
    labels[rows, size // 2 : (3 * size) // 4] = first + 1
    return labels


def _room_map(size: int, layout: float) -> np.ndarray:
    cut = _boundary_cut(size, layout)
    labels = np.full((size, size), FLOORING_BASE + terrain_variant(layout), dtype=np.int32)
    labels[:, :cut] = WALL_CLASS
    first = ROOM_OBJECT_BASE + layout_bin(layout)
    depth = max(size // 10, 1)
    cols = slice(cut, min(cut + depth, size))
    labels[size // 4 : size // 2, cols] = first
    labels[size // 2 : (3 * size) // 4, cols] = first + 1
    return labels


def _layout_params(count: int, rng: np.random.Generator) -> np.ndarray:
    # Evenly spaced in [0.2, 0.8] with jitter under half the spacing, so the
    # ordering of layout parameters is stable but not gridded.
    lo, hi = LAYOUT_RANGE
    base = np.linspace(lo, hi, count)
    spacing = (hi - lo) / max(count - 1, 1)
    return base + rng.uniform(-0.25, 0.25, size=count) * spacing


def _descriptors(
    family: np.ndarray, layout: np.ndarray, rng: np.random.Generator, dim: int
) -> np.ndarray:
    if dim <= SIGNAL_DIMS:
        raise ValueError(f"descriptor dim must exceed {SIGNAL_DIMS}")
    n = family.size
    lo, hi = LAYOUT_RANGE
    alpha = np.pi * (layout - lo) / (hi - lo)
    block = 3.5 * np.stack(
        [np.sin(alpha), np.cos(alpha), np.sin(2.0 * alpha), np.cos(2.0 * alpha)],
        axis=1,
    )
    out = np.zeros((n, dim), dtype=np.float64)
    out[:, 0] = 2.0 * family
    field_rows = family > 0
    out[field_rows, 1:5] = block[field_rows]
    out[~field_rows, 5:9] = block[~field_rows]
    noise = rng.normal(0.0, 1.0, size=(n, dim - SIGNAL_DIMS))
    noise /= np.linalg.norm(noise, axis=1, keepdims=True)
    out[:, SIGNAL_DIMS:] = noise * (2.5 * np.sqrt(dim - SIGNAL_DIMS))
    return out.astype(np.float32)


def make_two_cluster_dataset(
    n_images: int = 200,
    n_field: int = 100,
    descriptor_dim: int = 48,
    map_size: int = 60,
    seed: int = 7,
) -> Dataset:
    """Two disjoint scene families with noise-buried layout descriptors."""
    if not 2 <= n_field <= n_images - 2:
        raise ValueError("each family needs at least two images")
    if map_size < 12:
        raise ValueError("maps too small to hold the boundary object strips")
    rng = np.random.default_rng(seed)
    n_room = n_images - n_field

    field_layout = _layout_params(n_field, rng)
    room_layout = _layout_params(n_room, rng)

    maps = []
    ids = []
    for i, t in enumerate(field_layout):
        maps.append(LabelMap(_field_map(map_size, t)))
        ids.append(f"field_{i:03d}")
    for i, t in enumerate(room_layout):
        maps.append(LabelMap(_room_map(map_size, t)))
        ids.append(f"room_{i:03d}")

    family = np.concatenate([np.full(n_field, 1.0), np.full(n_room, -1.0)])
    layout = np.concatenate([field_layout, room_layout])
    vectors = _descriptors(family, layout, rng, descriptor_dim)

    return Dataset(
        classes=make_class_table(),
        ids=tuple(ids),
        splits=("train",) * n_images,
        label_maps=tuple(maps),
        descriptors=DescriptorSet(vectors),
    )


def make_rare_class_trio(map_size: int = 12, n_filler: int = 7) -> tuple[Dataset, int, int, int]:
    """Rare-class ordering fixture; returns (dataset, query, rare_match, common_match).

    All maps are mostly class 1. The query and rare_match share a small patch
    of the rare object class in the top-left pyramid block; common_match
    carries class 2 there instead. Fillers contain classes 1 and 2 so the
    rare class stays rare (it appears in exactly two images).
    """
    if map_size < 6:
        raise ValueError("maps must span at least the 3x3 pyramid grid")
    rare = FIELD_OBJECT_BASE
    patch = max(map_size // 6, 1)

    query = np.ones((map_size, map_size), dtype=np.int32)
    query[:patch, : 2 * patch] = rare

    rare_match = query.copy()
    rare_match[-patch:, -4 * patch :] = 2  # a common-class block far from the shared patch

    common_match = np.ones((map_size, map_size), dtype=np.int32)
    common_match[:patch, : 2 * patch] = 2

    maps = [LabelMap(query), LabelMap(rare_match), LabelMap(common_match)]
    ids = ["query", "rare_match", "common_match"]
    for f in range(n_filler):
        filler = np.ones((map_size, map_size), dtype=np.int32)
        filler[-1:, :] = 2
        maps.append(LabelMap(filler))
        ids.append(f"filler_{f}")

    dataset = Dataset(
        classes=make_class_table(),
        ids=tuple(ids),
        splits=("train",) * len(ids),
        label_maps=tuple(maps),
    )
    return dataset, 0, 1, 2
