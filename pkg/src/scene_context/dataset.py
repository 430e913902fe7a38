"""Annotated label-map datasets: manifest loading, class tables, descriptor stores.

A dataset lives in one directory: a line-delimited ``manifest.jsonl`` whose
records are ``{"id", "labelmap_path", "split"}`` (plus an optional
``"descriptor"`` offset), a sibling ``classes.jsonl`` with records
``{"index", "name", "kind"}``, single-channel PNG label maps, and an optional
``descriptors.bin`` store with one float32 vector per image.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

UNLABELED_ID = 0
CLASS_KINDS = ("stuff", "things")

DESCRIPTOR_MAGIC = b"GCPD"
CLASS_FILE = "classes.jsonl"
DESCRIPTOR_FILE = "descriptors.bin"
LABELMAP_DIR = "labelmaps"
MANIFEST_FILE = "manifest.jsonl"


class DatasetError(ValueError):
    """Dataset-level validation failure; messages name the offending image."""


@dataclass(frozen=True)
class ClassTable:
    """Class metadata. Index 0 is the reserved unlabeled slot."""

    names: tuple[str, ...]
    kinds: tuple[str, ...]
    unlabeled_id: int = UNLABELED_ID

    def __post_init__(self) -> None:
        if len(self.names) != len(self.kinds):
            raise ValueError("names and kinds must have equal length")
        if len(self.names) < 2:
            raise ValueError("need at least one labeled class besides the unlabeled slot")
        if self.unlabeled_id != UNLABELED_ID:
            raise ValueError("index 0 is the reserved unlabeled slot")
        bad = sorted({kind for kind in self.kinds if kind not in CLASS_KINDS})
        if bad:
            raise ValueError(f"unknown class kind(s): {bad}")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def labeled_ids(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.num_classes) if i != self.unlabeled_id)

    def things_ids(self) -> tuple[int, ...]:
        return tuple(i for i in self.labeled_ids() if self.kinds[i] == "things")

    def stuff_ids(self) -> tuple[int, ...]:
        return tuple(i for i in self.labeled_ids() if self.kinds[i] == "stuff")


@dataclass(frozen=True)
class LabelMap:
    """A 2-D grid of per-pixel class indices (canonicalized to int32)."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.shape[0] < 1 or labels.shape[1] < 1:
            raise ValueError(f"label map must be a non-empty 2-D grid, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValueError(f"label map entries must be integers, got {labels.dtype}")
        if int(labels.min()) < 0:
            raise ValueError("label map entries must be non-negative")
        object.__setattr__(self, "labels", np.asarray(labels, dtype=np.int32))

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    def present_classes(self, unlabeled_id: int = UNLABELED_ID) -> np.ndarray:
        """Distinct non-unlabeled class indices present in this map."""
        present = np.unique(self.labels)
        return present[present != unlabeled_id]


@dataclass(frozen=True)
class ClassFrequency:
    """Image-presence counts: ``counts[c]`` = images where class c covers >= 1 pixel."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 1:
            raise ValueError("frequency counts must be one-dimensional")
        if counts.size == 0 or int(counts.min()) < 0:
            raise ValueError("frequency counts must be non-empty and non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return int(self.counts.size)


@dataclass(frozen=True)
class DescriptorSet:
    """One fixed-length float32 vector per image, aligned with manifest order."""

    vectors: np.ndarray

    def __post_init__(self) -> None:
        vectors = np.asarray(self.vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] < 1 or vectors.shape[1] < 1:
            raise ValueError(f"descriptors must form a non-empty 2-D array, got shape {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("descriptor entries must be finite")
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return int(self.vectors.shape[0])


@dataclass(frozen=True)
class Dataset:
    """Immutable image collection; manifest position is the image index everywhere."""

    classes: ClassTable
    ids: tuple[str, ...]
    splits: tuple[str, ...]
    label_maps: tuple[LabelMap, ...]
    descriptors: DescriptorSet | None = None

    def __post_init__(self) -> None:
        n = len(self.ids)
        if n == 0:
            raise DatasetError("empty dataset")
        if len(self.splits) != n or len(self.label_maps) != n:
            raise DatasetError("ids, splits, and label maps must align")
        if self.descriptors is not None and len(self.descriptors) != n:
            raise DatasetError(
                f"descriptor count {len(self.descriptors)} does not match image count {n}"
            )
        top_class = self.classes.num_classes - 1
        for image_id, label_map in zip(self.ids, self.label_maps):
            top = int(label_map.labels.max())
            if top > top_class:
                raise DatasetError(
                    f"image {image_id}: class index {top} out of range (have {self.classes.num_classes} classes)"
                )

    def __len__(self) -> int:
        return len(self.ids)


def class_frequency(dataset: Dataset, split: str | None = None) -> ClassFrequency:
    """Count, per class, the images in which it appears with at least one pixel.

    The unlabeled slot never counts. ``split`` restricts counting to one
    manifest split (frequencies are normally taken over the training portion).
    """
    counts = np.zeros(dataset.classes.num_classes, dtype=np.int64)
    selected = 0
    for label_map, image_split in zip(dataset.label_maps, dataset.splits):
        if split is not None and image_split != split:
            continue
        selected += 1
        counts[label_map.present_classes(dataset.classes.unlabeled_id)] += 1
    if selected == 0:
        raise DatasetError(f"no images in split {split!r}")
    return ClassFrequency(counts)


def write_descriptors(path: str | Path, vectors: np.ndarray) -> None:
    """Write a descriptor store: magic, u32 count, u32 dim, float32 rows (little-endian)."""
    vectors = np.ascontiguousarray(np.asarray(vectors, dtype="<f4"))
    if vectors.ndim != 2:
        raise ValueError("descriptor store expects a 2-D array")
    count, dim = vectors.shape
    header = struct.pack("<4sII", DESCRIPTOR_MAGIC, count, dim)
    Path(path).write_bytes(header + vectors.tobytes())


def read_descriptors(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != DESCRIPTOR_MAGIC:
        raise ValueError(f"{path}: not a descriptor store (bad magic)")
    count, dim = struct.unpack_from("<II", raw, 4)
    expected = 12 + 4 * count * dim
    if len(raw) != expected:
        raise ValueError(f"{path}: store holds {len(raw) - 12} payload bytes, expected {expected - 12}")
    data = np.frombuffer(raw, dtype="<f4", offset=12)
    return data.reshape(count, dim).copy()


def _read_jsonl(path: Path) -> list[dict]:
    records = []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{line_no}: bad JSON record: {exc}") from exc
    return records


def _load_class_table(path: Path) -> ClassTable:
    if not path.is_file():
        raise FileNotFoundError(f"class table not found: {path}")
    records = _read_jsonl(path)
    if not records:
        raise DatasetError("class table is empty")
    by_index: dict[int, tuple[str, str]] = {}
    for record in records:
        index = int(record["index"])
        if index in by_index:
            raise DatasetError(f"duplicate class index {index}")
        by_index[index] = (str(record["name"]), str(record["kind"]))
    if sorted(by_index) != list(range(len(by_index))):
        raise DatasetError("class indices must cover 0..C-1 without gaps")
    names = tuple(by_index[i][0] for i in range(len(by_index)))
    kinds = tuple(by_index[i][1] for i in range(len(by_index)))
    return ClassTable(names, kinds)


def _read_label_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise DatasetError(f"{path}: label maps must be single-channel, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise DatasetError(f"{path}: label maps must be integer-valued, got {arr.dtype}")
    return arr


def load_manifest(path: str | Path) -> Dataset:
    """Load a dataset from a line-delimited manifest.

    Label-map paths resolve relative to the manifest directory. The sibling
    ``classes.jsonl`` is required; ``descriptors.bin`` is picked up when
    present, with each record's optional ``"descriptor"`` offset selecting its
    row (manifest position by default).
    """
    manifest_path = Path(path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    records = _read_jsonl(manifest_path)
    if not records:
        raise DatasetError("empty dataset")
    root = manifest_path.parent
    classes = _load_class_table(root / CLASS_FILE)

    ids: list[str] = []
    splits: list[str] = []
    maps: list[LabelMap] = []
    offsets: list[int] = []
    for position, record in enumerate(records):
        image_id = str(record.get("id", position))
        map_path = root / str(record["labelmap_path"])
        if not map_path.is_file():
            raise DatasetError(f"image {image_id}: missing label map {map_path}")
        labels = _read_label_image(map_path)
        top = int(labels.max()) if labels.size else 0
        if top >= classes.num_classes:
            raise DatasetError(
                f"image {image_id}: class index {top} out of range (have {classes.num_classes} classes)"
            )
        ids.append(image_id)
        splits.append(str(record.get("split", "train")))
        maps.append(LabelMap(labels))
        offsets.append(int(record["descriptor"]) if "descriptor" in record else position)

    descriptors = None
    store_path = root / DESCRIPTOR_FILE
    if store_path.is_file():
        vectors = read_descriptors(store_path)
        for image_id, offset in zip(ids, offsets):
            if not 0 <= offset < vectors.shape[0]:
                raise DatasetError(
                    f"image {image_id}: descriptor offset {offset} outside store of {vectors.shape[0]} rows"
                )
        descriptors = DescriptorSet(vectors[np.asarray(offsets)])

    return Dataset(classes, tuple(ids), tuple(splits), tuple(maps), descriptors)


def save_dataset(dataset: Dataset, out_dir: str | Path) -> Path:
    """Write manifest, class table, PNG label maps, and any descriptor store.

    Returns the manifest path. Loading it back reproduces label maps and
    descriptors bit for bit. Image ids are used as file names.
    """
    root = Path(out_dir)
    (root / LABELMAP_DIR).mkdir(parents=True, exist_ok=True)
    # 8-bit PNGs hold up to 256 classes; wider tables need the 16-bit variant.
    dtype = np.uint8 if dataset.classes.num_classes <= 256 else np.uint16

    manifest_lines = []
    for image_id, split, label_map in zip(dataset.ids, dataset.splits, dataset.label_maps):
        rel = f"{LABELMAP_DIR}/{image_id}.png"
        Image.fromarray(label_map.labels.astype(dtype)).save(root / rel)
        manifest_lines.append(json.dumps({"id": image_id, "labelmap_path": rel, "split": split}, sort_keys=True))

    class_lines = [
        json.dumps({"index": i, "name": dataset.classes.names[i], "kind": dataset.classes.kinds[i]}, sort_keys=True)
        for i in range(dataset.classes.num_classes)
    ]
    (root / CLASS_FILE).write_text("\n".join(class_lines) + "\n")

    if dataset.descriptors is not None:
        write_descriptors(root / DESCRIPTOR_FILE, dataset.descriptors.vectors)

    manifest_path = root / MANIFEST_FILE
    manifest_path.write_text("\n".join(manifest_lines) + "\n")
    return manifest_path
