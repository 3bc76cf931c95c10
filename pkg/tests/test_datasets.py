import numpy as np
import pytest
import torch

from datasets import DESK_DOMAIN, STUB_DOMAIN, class_tint, desk_splits, make_desk_dataset
from errors import InvalidInputError


def test_desk_dataset_is_balanced_and_in_range():
    data = make_desk_dataset(4, 6, (3, 8, 8), seed=1)
    assert len(data) == 24
    assert data.class_counts() == [6, 6, 6, 6]
    assert data.shape == (3, 8, 8)
    assert float(data.images.min()) >= 0.0 and float(data.images.max()) <= 1.0


def test_desk_dataset_is_deterministic():
    a = make_desk_dataset(3, 4, (3, 8, 8), seed=2)
    b = make_desk_dataset(3, 4, (3, 8, 8), seed=2)
    assert torch.equal(a.images, b.images)


def test_splits_do_not_share_images():
    train, test = desk_splits(2, 5, 5, (3, 8, 8), seed=0)
    assert not any(torch.equal(a, b) for a in train.images for b in test.images)


def test_desk_domain_is_shifted_from_stub():
    assert not np.allclose(class_tint(1, 3, DESK_DOMAIN), class_tint(1, 3, STUB_DOMAIN))


def test_subset_keeps_labels():
    data = make_desk_dataset(2, 3, (1, 4, 4))
    part = data.subset([0, 5])
    assert part.labels.tolist() == [0, 1]


def test_invalid_sizes():
    with pytest.raises(InvalidInputError):
        make_desk_dataset(1, 5)


def test_desk_classes_are_linearly_separable():
    train, test = desk_splits(4, 1000, 250, (3, 16, 16), seed=0)

    def features(data):
        x = data.images.flatten(1).double().numpy()
        return np.hstack([x, np.ones((len(x), 1))])

    # least-squares fit onto one-hot targets
    targets = np.eye(4)[train.labels.numpy()]
    weights, *_ = np.linalg.lstsq(features(train), targets, rcond=None)
    predicted = features(test) @ weights
    assert (predicted.argmax(axis=1) == test.labels.numpy()).mean() >= 0.99
