import json

import numpy as np
import pytest
from PIL import Image

from scene_context.dataset import (
    ClassTable,
    Dataset,
    DatasetError,
    LabelMap,
    class_frequency,
    load_manifest,
    read_descriptors,
    save_dataset,
    write_descriptors,
)
from conftest import dataset_from_maps


def write_corpus(root, maps, num_classes, records=None):
    """Write classes.jsonl + PNGs + manifest.jsonl by hand."""
    (root / "labelmaps").mkdir(exist_ok=True)
    lines = []
    for i in range(num_classes):
        kind = "stuff" if i == 0 else "things"
        lines.append(json.dumps({"index": i, "name": f"c{i}", "kind": kind}))
    (root / "classes.jsonl").write_text("\n".join(lines) + "\n")
    manifest = []
    for i, labels in enumerate(maps):
        rel = f"labelmaps/m{i}.png"
        Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(root / rel)
        manifest.append({"id": f"m{i}", "labelmap_path": rel, "split": "train"})
    if records is not None:
        manifest = records
    path = root / "manifest.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in manifest) + "\n")
    return path


class TestLoadManifest:
    def test_three_entries(self, tmp_path):
        maps = [np.full((4, 4), i % 3, dtype=np.uint8) for i in range(3)]
        path = write_corpus(tmp_path, maps, num_classes=3)
        data = load_manifest(path)
        assert len(data) == 3
        assert data.ids == ("m0", "m1", "m2")
        for i in range(3):
            np.testing.assert_array_equal(data.label_maps[i].labels, maps[i])

    def test_out_of_range_class_names_image(self, tmp_path):
        maps = [np.zeros((4, 4), dtype=np.uint8), np.full((4, 4), 3, dtype=np.uint8)]
        path = write_corpus(tmp_path, maps, num_classes=3)  # valid ids are 0..2
        with pytest.raises(DatasetError, match="m1"):
            load_manifest(path)

    def test_empty_manifest(self, tmp_path):
        path = write_corpus(tmp_path, [], num_classes=2, records=[])
        path.write_text("")
        with pytest.raises(DatasetError, match="empty dataset"):
            load_manifest(path)

    def test_missing_label_map_names_image(self, tmp_path):
        records = [{"id": "ghost", "labelmap_path": "labelmaps/nope.png", "split": "train"}]
        path = write_corpus(tmp_path, [], num_classes=2, records=records)
        with pytest.raises(DatasetError, match="ghost"):
            load_manifest(path)

    def test_descriptor_store_is_attached(self, tmp_path):
        maps = [np.ones((3, 3), dtype=np.uint8)] * 2
        path = write_corpus(tmp_path, maps, num_classes=2)
        vectors = np.arange(8, dtype=np.float32).reshape(2, 4)
        write_descriptors(tmp_path / "descriptors.bin", vectors)
        data = load_manifest(path)
        np.testing.assert_array_equal(data.descriptors.vectors, vectors)


class TestSaveRoundTrip:
    def test_bit_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        maps = [rng.integers(0, 5, size=(6, 7)) for _ in range(4)]
        vecs = rng.normal(size=(4, 6)).astype(np.float32)
        data = dataset_from_maps(maps, num_classes=5, descriptors=vecs)
        manifest = save_dataset(data, tmp_path)
        back = load_manifest(manifest)
        assert back.ids == data.ids
        assert back.classes.names == data.classes.names
        for a, b in zip(back.label_maps, data.label_maps):
            np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(back.descriptors.vectors, vecs)

    def test_saved_files_are_deterministic(self, tmp_path):
        maps = [np.full((3, 3), 1, dtype=np.int32)]
        data = dataset_from_maps(maps, num_classes=2)
        first = save_dataset(data, tmp_path / "a")
        second = save_dataset(data, tmp_path / "b")
        assert first.read_bytes() == second.read_bytes()


class TestClassFrequency:
    def test_presence_counts(self):
        # both images contain class 1; only the first also has class 2
        m0 = np.array([[1, 2], [1, 1]])
        m1 = np.array([[1, 1], [0, 0]])
        freq = class_frequency(dataset_from_maps([m0, m1], num_classes=3))
        assert freq.counts[1] == 2
        assert freq.counts[2] == 1

    def test_absent_class_is_zero(self):
        freq = class_frequency(dataset_from_maps([np.array([[1]])], num_classes=4))
        assert freq.counts[2] == 0 and freq.counts[3] == 0

    def test_unlabeled_image_contributes_nothing(self):
        m0 = np.zeros((3, 3), dtype=np.int32)
        m1 = np.array([[1, 0], [0, 0]])
        freq = class_frequency(dataset_from_maps([m0, m1], num_classes=2))
        assert freq.counts[0] == 0
        assert freq.counts[1] == 1

    def test_split_filter(self):
        maps = [np.array([[1]]), np.array([[2]])]
        data = dataset_from_maps(maps, num_classes=3, splits=("train", "val"))
        freq = class_frequency(data, split="train")
        assert freq.counts[1] == 1 and freq.counts[2] == 0
        with pytest.raises(DatasetError):
            class_frequency(data, split="test")

    def test_multiple_pixels_count_once(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            labels = rng.integers(0, 4, size=(8, 8))
            freq = class_frequency(dataset_from_maps([labels], num_classes=4))
            present = set(np.unique(labels)) - {0}
            for c in range(1, 4):
                assert freq.counts[c] == (1 if c in present else 0)


class TestDescriptorStore:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        for trial in range(5):
            vectors = rng.normal(size=(trial + 1, 3)).astype(np.float32)
            path = tmp_path / f"d{trial}.bin"
            write_descriptors(path, vectors)
            np.testing.assert_array_equal(read_descriptors(path), vectors)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "d.bin"
        write_descriptors(path, np.zeros((2, 3), dtype=np.float32))
        raw = path.read_bytes()
        assert raw[:4] == b"GCPD"
        assert int.from_bytes(raw[4:8], "little") == 2
        assert int.from_bytes(raw[8:12], "little") == 3
        assert len(raw) == 12 + 2 * 3 * 4

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "d.bin"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(ValueError, match="magic"):
            read_descriptors(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "d.bin"
        write_descriptors(path, np.zeros((2, 3), dtype=np.float32))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ValueError):
            read_descriptors(path)


class TestValidation:
    def test_class_table_rejects_unknown_kind(self):
        with pytest.raises(ValueError, match="kind"):
            ClassTable(("unlabeled", "a"), ("stuff", "liquid"))

    def test_class_table_kind_queries(self):
        table = ClassTable(("unlabeled", "sky", "car"), ("stuff", "stuff", "things"))
        assert table.labeled_ids() == (1, 2)
        assert table.stuff_ids() == (1,)
        assert table.things_ids() == (2,)

    def test_label_map_rejects_negatives_and_floats(self):
        with pytest.raises(ValueError):
            LabelMap(np.array([[-1]]))
        with pytest.raises(ValueError):
            LabelMap(np.array([[0.5]]))

    def test_dataset_rejects_misaligned_descriptors(self):
        table = ClassTable(("unlabeled", "a"), ("stuff", "things"))
        maps = (LabelMap(np.array([[1]])),)
        from scene_context.dataset import DescriptorSet

        with pytest.raises(DatasetError, match="descriptor count"):
            Dataset(table, ("x",), ("train",), maps, DescriptorSet(np.zeros((2, 2), dtype=np.float32)))
