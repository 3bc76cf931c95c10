"""Labeled image sets and the procedural desk-scale data source.

The desk dataset and the offline stub generator share the same per-class
templates (a colour tint plus an oriented sinusoidal grating) but draw
them from two slightly different domains, so a model pretrained on stub
images transfers only partially to the "real" harness data.
"""
import colorsys
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torchvision import datasets, transforms

from errors import InvalidInputError

logger = logging.getLogger(__name__)

GOLDEN = 0.6180339887498949


@dataclass(frozen=True)
class Domain:
    hue_shift: float = 0.0
    saturation: float = 0.6
    contrast: float = 0.15
    noise: float = 0.05
    tint_jitter: float = 0.0


STUB_DOMAIN = Domain()
DESK_DOMAIN = Domain(hue_shift=0.04, saturation=0.5, contrast=0.2, noise=0.08, tint_jitter=0.03)


def class_tint(class_index, channels, domain=STUB_DOMAIN):
    hue = (class_index * GOLDEN + domain.hue_shift) % 1.0
    rgb = np.array(colorsys.hsv_to_rgb(hue, domain.saturation, 0.8))
    # squeeze into [0.25, 0.75] so the grating and noise rarely clip
    rgb = 0.25 + 0.5 * rgb
    if channels == 3:
        return rgb
    if channels == 1:
        return np.array([rgb.mean()])
    return np.resize(rgb, channels)


def class_grating(class_index, height, width, phase):
    angle = (class_index * GOLDEN * np.pi) % np.pi
    frequency = 2.0 + (class_index % 3)
    v, u = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    return np.cos(2 * np.pi * frequency * (u * np.cos(angle) + v * np.sin(angle)) + phase)


def render_pattern(class_index, shape, rng, domain=STUB_DOMAIN):
    """Draw one C×H×W image of ``class_index`` from ``domain``; values in [0, 1]."""
    if class_index < 0:
        raise InvalidInputError(f"class index must be non-negative, got {class_index}")
    channels, height, width = shape
    tint = class_tint(class_index, channels, domain)
    if domain.tint_jitter:
        tint = tint + rng.normal(0.0, domain.tint_jitter, size=channels)
    phase = rng.uniform(0.0, 2 * np.pi)
    grating = class_grating(class_index, height, width, phase)
    image = tint[:, None, None] + domain.contrast * grating[None, :, :]
    image = image + rng.normal(0.0, domain.noise, size=(channels, height, width))
    return np.clip(image, 0.0, 1.0)


@dataclass
class LabeledSet:
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise InvalidInputError(f"images must be N×C×H×W, got shape {tuple(self.images.shape)}")
        if len(self.images) != len(self.labels):
            raise InvalidInputError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices):
        index = torch.as_tensor(indices, dtype=torch.long)
        return LabeledSet(self.images[index], self.labels[index], self.num_classes, self.name, dict(self.meta))

    def class_counts(self):
        return torch.bincount(self.labels, minlength=self.num_classes).tolist()


def make_desk_dataset(num_classes, per_class, shape=(3, 32, 32), seed=0, domain=DESK_DOMAIN, name="desk"):
    """Balanced procedural dataset, ordered class by class."""
    if num_classes < 2 or per_class < 1:
        raise InvalidInputError("desk dataset needs at least 2 classes and 1 image per class")
    images = np.empty((num_classes * per_class, *shape), dtype=np.float32)
    labels = np.repeat(np.arange(num_classes), per_class)
    for k in range(num_classes):
        rng = np.random.default_rng([seed, k])
        for j in range(per_class):
            images[k * per_class + j] = render_pattern(k, shape, rng, domain)
    return LabeledSet(torch.from_numpy(images), torch.from_numpy(labels).long(), num_classes, name)


def desk_splits(num_classes, train_per_class, test_per_class, shape=(3, 32, 32), seed=0):
    # distinct seed streams keep the splits disjoint
    train = make_desk_dataset(num_classes, train_per_class, shape, seed=2 * seed, name="desk-train")
    test = make_desk_dataset(num_classes, test_per_class, shape, seed=2 * seed + 1, name="desk-test")
    return train, test


def load_torchvision(name, root, train):
    """CIFAR-10/100 through torchvision, for full-scale runs."""
    loaders = {"cifar10": (datasets.CIFAR10, 10), "cifar100": (datasets.CIFAR100, 100)}
    if name not in loaders:
        raise InvalidInputError(f"no torchvision loader for dataset '{name}'")
    cls, num_classes = loaders[name]
    logger.info("Loading %s (%s split) from %s", name, "train" if train else "test", root)
    data = cls(root=root, train=train, download=True, transform=transforms.ToTensor())
    images = torch.from_numpy(data.data).permute(0, 3, 1, 2).float().div(255.0)
    labels = torch.as_tensor(data.targets, dtype=torch.long)
    return LabeledSet(images, labels, num_classes, f"{name}-{'train' if train else 'test'}")
