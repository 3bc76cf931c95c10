"""White-box L∞ sign-gradient attacks on the substitute.

All three methods share one projection (ε-ball first, then the [0, 1]
box), so BIM and PGD with a single step of size ε and no random start
reproduce FGSM bit for bit.
"""
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from errors import InvalidInputError
from model_zoo import LossSpec, check_labels, input_gradient

logger = logging.getLogger(__name__)

METHODS = ("FGSM", "BIM", "PGD")


@dataclass(frozen=True)
class AttackSpec:
    method: str = "PGD"
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    targeted: bool = False
    target_class: int = None
    random_start: bool = None
    seed: int = 0

    def __post_init__(self):
        method = self.method.upper()
        object.__setattr__(self, "method", method)
        if method not in METHODS:
            raise InvalidInputError(f"unknown attack method '{self.method}'")
        if method == "FGSM":
            object.__setattr__(self, "steps", 1)
            object.__setattr__(self, "alpha", self.epsilon)
        if self.random_start is None:
            object.__setattr__(self, "random_start", method == "PGD")
        if not 0 < self.alpha <= self.epsilon <= 1:
            raise InvalidInputError("attack needs 0 < alpha <= epsilon <= 1")
        if self.steps < 1:
            raise InvalidInputError("steps must be >= 1")

    @property
    def name(self):
        kind = "targeted" if self.targeted else "untargeted"
        return f"{self.method}-{kind}"

    def to_dict(self):
        return asdict(self)


def attack_targets(labels, spec, num_classes):
    """Target classes for a targeted attack: a fixed class, else the next class (y+1 mod K)."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if spec.target_class is not None:
        if not 0 <= spec.target_class < num_classes:
            raise InvalidInputError(f"target class {spec.target_class} out of range")
        return torch.full_like(labels, spec.target_class)
    return (labels + 1) % num_classes


def _project(x, x_adv, epsilon):
    x_adv = torch.max(torch.min(x_adv, x + epsilon), x - epsilon)
    return x_adv.clamp(0.0, 1.0)


def _signed_step(model, x_adv, labels, spec, step):
    grad = input_gradient(model, x_adv, LossSpec(labels))
    # torch.sign(0) == 0: zero-gradient coordinates stay put
    direction = -grad.sign() if spec.targeted else grad.sign()
    return x_adv + step * direction


def _prepare(model, x, y, spec):
    if x.ndim != 4:
        raise InvalidInputError("attacks expect an N×C×H×W batch")
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise InvalidInputError("clean inputs must lie in [0, 1]")
    num_classes = model.spec.num_classes
    y = check_labels(y, num_classes, len(x))
    labels = attack_targets(y, spec, num_classes) if spec.targeted else y
    dtype = next(model.parameters()).dtype
    return x.detach().to(dtype), labels


def _iterate(model, x, labels, spec, x0):
    x_adv = x0
    for _ in range(spec.steps):
        x_adv = _project(x, _signed_step(model, x_adv, labels, spec, spec.alpha), spec.epsilon)
    return x_adv.detach()


def fgsm(model, x, y, spec):
    x, labels = _prepare(model, x, y, spec)
    return _project(x, _signed_step(model, x, labels, spec, spec.epsilon), spec.epsilon).detach()


def bim(model, x, y, spec):
    x, labels = _prepare(model, x, y, spec)
    return _iterate(model, x, labels, spec, x)


def _start_noise(shape, seed, dtype):
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=generator, dtype=dtype) * 2 - 1


def pgd(model, x, y, spec, noise=None):
    """``noise`` in [-1, 1] overrides the seeded random start, so a chunk can take its slice of a batch draw."""
    x, labels = _prepare(model, x, y, spec)
    x0 = x
    if spec.random_start:
        noise = _start_noise(x.shape, spec.seed, x.dtype) if noise is None else noise.to(x.dtype)
        x0 = _project(x, x + spec.epsilon * noise, spec.epsilon)
    return _iterate(model, x, labels, spec, x0)


ATTACKS = {"FGSM": fgsm, "BIM": bim, "PGD": pgd}


def uniform_noise(x, epsilon, seed=0):
    """Random L∞ perturbation of the same budget, the no-model baseline."""
    generator = torch.Generator().manual_seed(seed)
    noise = (torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1) * epsilon
    return _project(x, x + noise, epsilon)


def linf_norms(x, x_adv):
    return (x_adv - x.to(x_adv.dtype)).abs().flatten(1).max(dim=1).values if len(x) else torch.empty(0)


def batch_attack(model, batch, labels, spec, chunk_size=256):
    """Run ``spec`` over a whole batch; returns the adversarial batch and per-example L∞ norms."""
    if batch.ndim != 4 or tuple(batch.shape[1:]) != model.spec.input_shape:
        raise InvalidInputError(f"expected N×{model.spec.input_shape} batch, got {tuple(batch.shape)}")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(labels) != len(batch):
        raise InvalidInputError("batch and labels differ in length")
    attack = ATTACKS[spec.method]
    noise = None
    if spec.method == "PGD" and spec.random_start:
        # one draw for the whole batch keeps the start independent of chunk_size
        noise = _start_noise(batch.shape, spec.seed, next(model.parameters()).dtype)
    chunks = []
    for i in range(0, len(batch), chunk_size):
        extra = {} if noise is None else {"noise": noise[i:i + chunk_size]}
        chunks.append(attack(model, batch[i:i + chunk_size], labels[i:i + chunk_size], spec, **extra))
    adversarial = torch.cat(chunks) if chunks else batch.clone()
    norms = linf_norms(batch, adversarial)
    logger.info("%s: %d examples, max L∞ %.6f (ε=%.6f)", spec.name, len(batch), norms.max().item() if len(norms) else 0.0, spec.epsilon)
    return adversarial, norms


def save_adversarial(path, adversarial, spec, source_dataset, seed):
    """Float blob (little-endian float32, length-prefixed) plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(adversarial.detach().cpu().numpy(), dtype="<f4")
    header = json.dumps({"shape": list(array.shape), "dtype": "<f4"}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        f.write(array.tobytes())
    sidecar = path.with_suffix(".json")
    with open(sidecar, "w") as f:
        json.dump({"spec": spec.to_dict(), "source_dataset": source_dataset, "seed": seed}, f, indent=2, sort_keys=True)
    return path


def load_adversarial(path):
    data = Path(path).read_bytes()
    header_len = int.from_bytes(data[:8], "little")
    header = json.loads(data[8:8 + header_len])
    array = np.frombuffer(data, dtype=header["dtype"], offset=8 + header_len).reshape(header["shape"])
    with open(Path(path).with_suffix(".json")) as f:
        sidecar = json.load(f)
    return torch.from_numpy(array.astype(np.float32)), sidecar
