"""Registry of small image classifiers.

Architectures are addressed only by spec strings so target and substitute
can differ by configuration alone. Desk-scale variants are channel-reduced
versions of the usual families. "alexnet" and "wrn-16" are the
small-image forms of AlexNet and WRN-16-4; "resnet-18", "resnet-34",
"vgg-16" and "vgg-19" are full-size torchvision networks.
"""
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision import models

from errors import ChecksumError, InvalidInputError, RegistryError

logger = logging.getLogger(__name__)

MAGIC = b"SHDWCKPT"
_LENGTH = struct.Struct("<Q")

_REGISTRY = {}


def register(arch_id):
    def decorator(builder):
        _REGISTRY[arch_id] = builder
        return builder
    return decorator


def registered_architectures():
    return sorted(_REGISTRY)


@dataclass(frozen=True)
class ClassifierSpec:
    arch_id: str
    num_classes: int
    input_shape: tuple = (3, 32, 32)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if self.arch_id not in _REGISTRY:
            raise RegistryError(f"unknown architecture '{self.arch_id}', known: {registered_architectures()}")
        if self.num_classes < 2:
            raise InvalidInputError("a classifier needs at least 2 classes")
        if len(self.input_shape) != 3:
            raise InvalidInputError(f"input_shape must be (C, H, W), got {self.input_shape}")

    def to_dict(self):
        data = asdict(self)
        data["input_shape"] = list(self.input_shape)
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(data["arch_id"], data["num_classes"], tuple(data["input_shape"]), data.get("seed", 0))


class Classifier(nn.Module):
    """Uniform wrapper: ImageBatch (N×C×H×W in [0, 1]) to N×K logits."""

    def __init__(self, spec, net):
        super().__init__()
        self.spec = spec
        self.net = net
        self.metadata = {}

    def forward(self, x):
        return self.net(x)


@register("linear")
def _linear(spec):
    channels, height, width = spec.input_shape
    return nn.Sequential(nn.Flatten(), nn.Linear(channels * height * width, spec.num_classes))


@register("convnet-s")
def _convnet_s(spec):
    channels = spec.input_shape[0]
    return nn.Sequential(
        nn.Conv2d(channels, 16, 3, padding=1), nn.BatchNorm2d(16), nn.ReLU(), nn.AvgPool2d(2),
        nn.Conv2d(16, 32, 3, padding=1), nn.BatchNorm2d(32), nn.ReLU(), nn.AvgPool2d(2),
        nn.AdaptiveAvgPool2d(4), nn.Flatten(),
        nn.Linear(32 * 16, spec.num_classes),
    )


@register("vgg-tiny")
def _vgg_tiny(spec):
    layers = []
    in_channels = spec.input_shape[0]
    for v in (16, 16, "M", 32, 32, "M", 64, "M"):
        if v == "M":
            layers.append(nn.MaxPool2d(2))
            continue
        layers += [nn.Conv2d(in_channels, v, 3, padding=1), nn.BatchNorm2d(v), nn.ReLU()]
        in_channels = v
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(64, spec.num_classes)]
    return nn.Sequential(*layers)


class BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False),
                nn.BatchNorm2d(planes),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class TinyResNet(nn.Module):
    def __init__(self, blocks, num_classes, in_channels=3, widths=(8, 16, 32, 64)):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(),
        )
        layers = []
        in_planes = widths[0]
        for i, (count, planes) in enumerate(zip(blocks, widths)):
            for j in range(count):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(BasicBlock(in_planes, planes, stride))
                in_planes = planes
        self.layers = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(in_planes, num_classes)

    def forward(self, x):
        out = self.layers(self.stem(x))
        return self.fc(torch.flatten(self.pool(out), 1))


@register("resnet-tiny-18")
def _resnet_tiny_18(spec):
    return TinyResNet((2, 2, 2, 2), spec.num_classes, spec.input_shape[0])


@register("resnet-tiny-34")
def _resnet_tiny_34(spec):
    return TinyResNet((3, 4, 6, 3), spec.num_classes, spec.input_shape[0])


class WideBasic(nn.Module):
    """Pre-activation wide residual block."""

    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False)

    def forward(self, x):
        out = F.relu(self.bn1(x))
        shortcut = x if self.shortcut is None else self.shortcut(out)
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + shortcut


class WideResNet(nn.Module):
    def __init__(self, depth, widen, num_classes, in_channels=3):
        super().__init__()
        if (depth - 4) % 6:
            raise InvalidInputError(f"wide resnet depth must be 6n+4, got {depth}")
        n = (depth - 4) // 6
        widths = (16, 16 * widen, 32 * widen, 64 * widen)
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False)
        layers = []
        in_planes = widths[0]
        for i, planes in enumerate(widths[1:]):
            for j in range(n):
                layers.append(WideBasic(in_planes, planes, 2 if (i > 0 and j == 0) else 1))
                in_planes = planes
        self.layers = nn.Sequential(*layers)
        self.bn = nn.BatchNorm2d(in_planes)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(in_planes, num_classes)

    def forward(self, x):
        out = F.relu(self.bn(self.layers(self.stem(x))))
        return self.fc(torch.flatten(self.pool(out), 1))


@register("wrn-16")
def _wrn_16(spec):
    return WideResNet(16, 4, spec.num_classes, spec.input_shape[0])


@register("alexnet")
def _alexnet(spec):
    # 3x3 stem so 32px inputs survive the three pooling stages
    return nn.Sequential(
        nn.Conv2d(spec.input_shape[0], 64, 3, stride=2, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(64, 192, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(192, 384, 3, padding=1), nn.ReLU(),
        nn.Conv2d(384, 256, 3, padding=1), nn.ReLU(),
        nn.Conv2d(256, 256, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.AdaptiveAvgPool2d(2), nn.Flatten(),
        nn.Dropout(), nn.Linear(256 * 4, 4096), nn.ReLU(),
        nn.Dropout(), nn.Linear(4096, 4096), nn.ReLU(),
        nn.Linear(4096, spec.num_classes),
    )


# full-size torchvision networks, RGB only
TORCHVISION_ARCHS = {
    "resnet-18": models.resnet18,
    "resnet-34": models.resnet34,
    "vgg-16": models.vgg16_bn,
    "vgg-19": models.vgg19_bn,
}


def _torchvision_builder(factory):
    def builder(spec):
        if spec.input_shape[0] != 3:
            raise InvalidInputError(f"{spec.arch_id} takes 3-channel images, got {spec.input_shape[0]}")
        return factory(weights=None, num_classes=spec.num_classes)
    return builder


for _arch_id, _factory in TORCHVISION_ARCHS.items():
    register(_arch_id)(_torchvision_builder(_factory))


def build(spec):
    """Construct a freshly initialized classifier; identical spec gives identical weights."""
    if spec.arch_id not in _REGISTRY:
        raise RegistryError(f"unknown architecture '{spec.arch_id}'")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        net = _REGISTRY[spec.arch_id](spec)
    return Classifier(spec, net)


def _check_batch(model, x):
    if x.ndim != 4 or tuple(x.shape[1:]) != model.spec.input_shape:
        raise InvalidInputError(f"expected N×{model.spec.input_shape} batch, got {tuple(x.shape)}")


def _param_dtype(model):
    return next(model.parameters()).dtype


@torch.no_grad()
def predict_logits(model, images, batch_size=512):
    _check_batch(model, images)
    was_training = model.training
    model.eval()
    try:
        dtype = _param_dtype(model)
        outputs = [model(images[i:i + batch_size].to(dtype)) for i in range(0, len(images), batch_size)]
    finally:
        model.train(was_training)
    if not outputs:
        return torch.empty(0, model.spec.num_classes)
    return torch.cat(outputs)


def predict_labels(model, images, batch_size=512):
    return predict_logits(model, images, batch_size).argmax(dim=1)


@dataclass(frozen=True)
class LossSpec:
    """Loss whose input gradient is requested.

    kind "cross_entropy" sums per-example CE against ``labels``;
    kind "constant" is a detached loss with zero gradient.
    """
    labels: torch.Tensor = None
    kind: str = "cross_entropy"


def check_labels(labels, num_classes, n=None):
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.ndim != 1:
        raise InvalidInputError("labels must be a 1-D sequence of class indices")
    if n is not None and len(labels) != n:
        raise InvalidInputError(f"expected {n} labels, got {len(labels)}")
    if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidInputError(f"label out of range [0, {num_classes})")
    return labels


def input_gradient(model, x, loss_spec):
    """Gradient of the loss w.r.t. the input only, with the model in inference mode."""
    _check_batch(model, x)
    if loss_spec.kind == "constant":
        return torch.zeros_like(x)
    if loss_spec.kind != "cross_entropy":
        raise InvalidInputError(f"unknown loss kind '{loss_spec.kind}'")
    labels = check_labels(loss_spec.labels, model.spec.num_classes, len(x))
    was_training = model.training
    model.eval()
    try:
        x = x.detach().clone().to(_param_dtype(model)).requires_grad_(True)
        loss = F.cross_entropy(model(x), labels, reduction="sum")
        grad, = torch.autograd.grad(loss, x)
    finally:
        model.train(was_training)
    return grad.detach()


def save(model, path, metadata=None):
    """Write a checkpoint: magic, u64 header length, JSON header, raw little-endian tensors."""
    tensors = []
    chunks = []
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().numpy()
        dtype = array.dtype.newbyteorder("<")
        chunks.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
        tensors.append({"name": name, "shape": list(array.shape), "dtype": dtype.str})
    payload = b"".join(chunks)
    meta = dict(model.metadata)
    meta.update(metadata or {})
    header = json.dumps({
        "spec": model.spec.to_dict(),
        "metadata": meta,
        "tensors": tensors,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_LENGTH.pack(len(header)))
        f.write(header)
        f.write(payload)
    return path


def read_header(path):
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC) or len(data) < len(MAGIC) + _LENGTH.size:
        raise ChecksumError(f"{path} is not a checkpoint")
    offset = len(MAGIC) + _LENGTH.size
    (header_len,) = _LENGTH.unpack(data[len(MAGIC):offset])
    if offset + header_len > len(data):
        raise ChecksumError(f"{path} is truncated")
    try:
        header = json.loads(data[offset:offset + header_len])
    except ValueError as e:
        raise ChecksumError(f"{path} has a corrupt header") from e
    return header, data[offset + header_len:]


def load(path):
    header, payload = read_header(path)
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ChecksumError(f"{path} failed its checksum")
    model = build(ClassifierSpec.from_dict(header["spec"]))
    if any(item["dtype"] == "<f8" for item in header["tensors"]):
        model.double()
    state = {}
    offset = 0
    for item in header["tensors"]:
        dtype = np.dtype(item["dtype"])
        count = int(np.prod(item["shape"])) if item["shape"] else 1
        array = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(item["shape"])
        offset += count * dtype.itemsize
        state[item["name"]] = torch.from_numpy(array.astype(dtype.newbyteorder("="), copy=True))
    model.load_state_dict(state)
    model.metadata = dict(header["metadata"])
    model.eval()
    return model
