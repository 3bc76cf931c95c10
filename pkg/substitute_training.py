"""Target training, substitute pretraining and single-round distillation.

The substitute is pretrained on synthetic images labelled by their prompt
class, then fine-tuned on one batch of target labels collected in a single
oracle round. No function here except ``collect_labels`` touches an oracle.
"""
import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

import settings
from errors import InvalidInputError
from model_zoo import check_labels, predict_labels, predict_logits

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 20
    initial_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    seed: int = 0
    hflip: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.initial_lr <= 0:
            raise InvalidInputError("initial_lr must be > 0")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")


# fine-tuning starts at a tenth of the pretraining rate
DISTILL_SCHEDULE = TrainSchedule(epochs=20, initial_lr=0.01)


def cosine_lr(initial_lr, epoch, total_epochs):
    return 0.5 * initial_lr * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    test_accuracy: float = None

    @property
    def final_lr(self):
        return self.records[-1].lr if self.records else None

    @property
    def losses(self):
        return [r.train_loss for r in self.records]

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "lr", "train_loss", "train_acc"])
            for r in self.records:
                writer.writerow([r.epoch, f"{r.lr:.8g}", f"{r.train_loss:.8g}", f"{r.train_acc:.8g}"])
        return path


@dataclass
class QueriedPairSet:
    images: torch.Tensor
    labels: torch.Tensor
    prompt_classes: torch.Tensor
    indices: list
    probabilities: torch.Tensor = None

    def __len__(self):
        return len(self.labels)

    def class_counts(self, num_classes):
        return torch.bincount(self.prompt_classes, minlength=num_classes).tolist()


@dataclass
class Selection:
    indices: list
    images: torch.Tensor
    prompt_classes: torch.Tensor
    class_counts: list


def _loader(images, targets, schedule):
    generator = torch.Generator().manual_seed(schedule.seed)
    return DataLoader(TensorDataset(images, targets), batch_size=schedule.batch_size, shuffle=True, generator=generator)


def _flip(x, generator):
    mask = torch.rand(len(x), generator=generator) < 0.5
    x = x.clone()
    x[mask] = x[mask].flip(-1)
    return x


def hard_label_loss(logits, labels):
    return F.cross_entropy(logits, labels)


def soft_label_loss(logits, probs):
    """KL(oracle ‖ substitute) at temperature 1, averaged over the batch."""
    return F.kl_div(F.log_softmax(logits, dim=1), probs, reduction="batchmean")


def _fit(model, images, targets, schedule, loss_fn, desc, progress=False):
    torch.manual_seed(schedule.seed)
    dtype = next(model.parameters()).dtype
    images = images.to(dtype)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=schedule.initial_lr, momentum=schedule.momentum, weight_decay=schedule.weight_decay
    )
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda epoch: cosine_lr(1.0, epoch, schedule.epochs)
    )
    loader = _loader(images, targets, schedule)
    flip_generator = torch.Generator().manual_seed(schedule.seed + 1)
    history = TrainHistory()
    for epoch in tqdm(range(schedule.epochs), desc=desc, disable=None if progress else True):
        model.train()
        lr = optimizer.param_groups[0]["lr"]
        total_loss, correct, seen = 0.0, 0, 0
        for x, y in loader:
            if schedule.hflip:
                x = _flip(x, flip_generator)
            logits = model(x)
            loss = loss_fn(logits, y)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(x)
            hard = y if y.ndim == 1 else y.argmax(dim=1)
            correct += (logits.argmax(dim=1) == hard).sum().item()
            seen += len(x)
        scheduler.step()
        history.records.append(EpochRecord(epoch, lr, total_loss / seen, correct / seen))
        logger.debug("%s epoch %d lr %.5f loss %.4f acc %.4f", desc, epoch, lr, total_loss / seen, correct / seen)
    model.eval()
    model.metadata.update({"epochs": schedule.epochs, "final_lr": history.final_lr, "seed": schedule.seed})
    return history


def train_target(model, train_set, schedule, test_set=None, progress=False):
    """Train the harness-side target on real labelled data."""
    if len(train_set) == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    if train_set.num_classes != model.spec.num_classes:
        raise InvalidInputError(
            f"dataset has {train_set.num_classes} classes, model expects {model.spec.num_classes}"
        )
    labels = check_labels(train_set.labels, model.spec.num_classes)
    history = _fit(model, train_set.images, labels, schedule, hard_label_loss, "train-target", progress)
    model.metadata["dataset_id"] = train_set.name
    if test_set is not None and len(test_set):
        predicted = predict_labels(model, test_set.images)
        history.test_accuracy = (predicted == test_set.labels).float().mean().item()
        model.metadata["test_accuracy"] = history.test_accuracy
        logger.info("Target %s test accuracy %.4f", model.spec.arch_id, history.test_accuracy)
    return model, history


def pretrain(substitute, pool, schedule, progress=False):
    """Fit the substitute on synthetic images labelled by prompt class. Queries nothing."""
    if len(pool) == 0:
        raise InvalidInputError("synthetic pool is empty")
    if pool.num_classes != substitute.spec.num_classes:
        raise InvalidInputError(
            f"pool has {pool.num_classes} classes, substitute expects {substitute.spec.num_classes}"
        )
    labels = check_labels(pool.labels, substitute.spec.num_classes)
    history = _fit(substitute, pool.images, labels, schedule, hard_label_loss, "pretrain", progress)
    substitute.metadata["dataset_id"] = pool.name or "synthetic"
    return substitute, history


def stratified_select(pool, budget, seed):
    """Pick ``budget`` pool images with per-class counts equal up to one.

    The remainder ``budget mod K`` goes to the first classes of a seeded
    shuffle of the class indices.
    """
    if budget < 1:
        raise InvalidInputError("budget must be >= 1 for selection")
    if budget > len(pool):
        raise InvalidInputError(f"budget {budget} exceeds pool size {len(pool)}")
    num_classes = pool.num_classes
    rng = np.random.default_rng(seed)
    order = rng.permutation(num_classes)
    counts = np.full(num_classes, budget // num_classes)
    counts[order[:budget % num_classes]] += 1
    labels = pool.labels.numpy()
    chosen = []
    for k in range(num_classes):
        members = np.flatnonzero(labels == k)
        if counts[k] > len(members):
            raise InvalidInputError(f"class {k} has {len(members)} images, {counts[k]} requested")
        chosen.extend(rng.choice(members, size=counts[k], replace=False).tolist())
    chosen.sort()
    index = torch.as_tensor(chosen, dtype=torch.long)
    return Selection(chosen, pool.images[index], pool.labels[index], counts.tolist())


def collect_labels(oracle, selection, ledger, soft=False):
    """The single oracle round: one query covering the whole selection."""
    if soft:
        response = oracle.query_soft(selection.images, ledger, settings.DISTILLATION_PURPOSE)
        probs = response.as_tensor()
        labels = probs.argmax(dim=1)
    else:
        response = oracle.query_hard(selection.images, ledger, settings.DISTILLATION_PURPOSE)
        probs = None
        labels = response.as_tensor()
    logger.info("Collected %d target labels (%s ledger used %d/%s)", len(labels), ledger.name, ledger.used, ledger.budget)
    return QueriedPairSet(selection.images, labels, selection.prompt_classes, list(selection.indices), probs)


def distill(substitute, pairs, schedule=DISTILL_SCHEDULE, progress=False):
    """Fine-tune on (x̂, y_T) by cross-entropy."""
    if len(pairs) == 0:
        raise InvalidInputError("no queried pairs to distill from")
    labels = check_labels(pairs.labels, substitute.spec.num_classes, len(pairs.images))
    return substitute, _fit(substitute, pairs.images, labels, schedule, hard_label_loss, "distill", progress)


def distill_soft(substitute, images, probabilities, schedule=DISTILL_SCHEDULE, progress=False):
    """Fine-tune on oracle probability rows by KL divergence."""
    probs = torch.as_tensor(probabilities)
    if probs.ndim != 2 or probs.shape != (len(images), substitute.spec.num_classes):
        raise InvalidInputError(f"expected {len(images)}×{substitute.spec.num_classes} probabilities")
    if len(images) == 0:
        raise InvalidInputError("no images to distill from")
    if (probs < 0).any() or not torch.allclose(probs.double().sum(dim=1), torch.ones(len(probs), dtype=torch.float64), atol=1e-5):
        raise InvalidInputError("probability rows must be non-negative and sum to 1")
    probs = probs.to(next(substitute.parameters()).dtype)
    return substitute, _fit(substitute, images, probs, schedule, soft_label_loss, "distill-soft", progress)


def mean_cross_entropy(model, images, labels):
    return F.cross_entropy(predict_logits(model, images), torch.as_tensor(labels, dtype=torch.long)).item()


def clone(model):
    return copy.deepcopy(model)
