import numpy as np
import pytest

from semcycle import toyworld as T
from semcycle.data import ClassCatalog


@pytest.fixture
def catalog5():
    return T.default_catalog(5)


@pytest.fixture
def small_world():
    return T.ToyWorld(T.SceneSpec(image_size=32, num_classes=5, shape_count_range=(2, 5), seed=3))


@pytest.fixture
def small_dataset_root(tmp_path, small_world):
    root = tmp_path / "toy"
    T.generate_dataset(small_world.spec, small_world.source_style, small_world.target_style, 6, 5, 4, root)
    return root


def random_labels(rng, n, h, w, c):
    return [rng.integers(0, c, size=(h, w)).astype(np.uint8) for _ in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
