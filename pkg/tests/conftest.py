import numpy as np
import pytest

from scene_context.dataset import ClassTable, Dataset, DescriptorSet, LabelMap
from scene_context.synthetic import make_two_cluster_dataset


def dataset_from_maps(maps, num_classes, splits=None, descriptors=None, kinds=None):
    """Assemble a Dataset from raw label arrays, ids img0, img1, ..."""
    maps = [np.asarray(m, dtype=np.int32) for m in maps]
    if kinds is None:
        kinds = ("stuff",) + ("things",) * (num_classes - 1)
    names = ("unlabeled",) + tuple(f"class_{i}" for i in range(1, num_classes))
    ids = tuple(f"img{i}" for i in range(len(maps)))
    if splits is None:
        splits = ("train",) * len(maps)
    store = DescriptorSet(np.asarray(descriptors, dtype=np.float32)) if descriptors is not None else None
    return Dataset(ClassTable(names, tuple(kinds)), ids, tuple(splits), tuple(LabelMap(m) for m in maps), store)


@pytest.fixture(scope="session")
def two_cluster():
    """The bundled synthetic fixture at its default operating point."""
    return make_two_cluster_dataset()
