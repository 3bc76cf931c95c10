import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from datasets import desk_splits  # noqa: E402
from model_zoo import ClassifierSpec, build  # noqa: E402
from synthgen import (  # noqa: E402
    ClassVocabulary, DESK_CLASSES, ImageCache, RequestDefaults, StubBackend, generate_pool, load_pool,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def desk_data():
    return desk_splits(4, 40, 20, (3, 16, 16), seed=0)


@pytest.fixture
def small_pool(tmp_path):
    manifest = generate_pool(
        ClassVocabulary(DESK_CLASSES),
        25,
        RequestDefaults(native_resolution=32),
        StubBackend(),
        ImageCache(tmp_path / "cache"),
        target_shape=(3, 16, 16),
        workers=2,
    )
    return load_pool(manifest)


@pytest.fixture
def tiny_model():
    def make(arch="convnet-s", num_classes=4, shape=(3, 16, 16), seed=0):
        return build(ClassifierSpec(arch, num_classes, shape, seed=seed))

    return make


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    yield
