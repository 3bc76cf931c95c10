"""Declarative experiment configuration.

A config is a JSON document (schema_version "1") mapped onto frozen
dataclasses. Unknown keys are errors, dataset presets fill in whatever the
document leaves out, and ``--set dotted.key=value`` overrides are applied
to the raw document before validation.
"""
import copy
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import settings
from attacks import AttackSpec
from errors import ConfigError, ShadowforgeError
from substitute_training import TrainSchedule
from synthgen import (
    CIFAR10_CLASSES, CIFAR100_CLASSES, DESK_CLASSES, IMAGEFRUIT_CLASSES, IMAGENETTE_CLASSES, IMAGESQUAWK_CLASSES,
    IMAGEYELLOW_CLASSES,
)

# class names, image shape and default query budget per dataset
PRESETS = {
    "desk": {"class_names": list(DESK_CLASSES), "shape": [3, 32, 32], "kind": "desk", "budget": 400},
    "cifar10": {"class_names": list(CIFAR10_CLASSES), "shape": [3, 32, 32], "kind": "cifar10", "budget": 5000},
    "cifar100": {"class_names": list(CIFAR100_CLASSES), "shape": [3, 32, 32], "kind": "cifar100", "budget": 150000},
    "imagenette": {"class_names": list(IMAGENETTE_CLASSES), "shape": [3, 256, 256], "kind": "manifest",
                   "budget": 1000},
    "imagefruit": {"class_names": list(IMAGEFRUIT_CLASSES), "shape": [3, 256, 256], "kind": "manifest", "budget": 130},
    "imageyellow": {"class_names": list(IMAGEYELLOW_CLASSES), "shape": [3, 256, 256], "kind": "manifest", "budget": 50},
    "imagesquawk": {"class_names": list(IMAGESQUAWK_CLASSES), "shape": [3, 256, 256], "kind": "manifest", "budget": 30},
    # 200 WordNet classes; the config supplies class_names
    "tiny-imagenet": {"shape": [3, 64, 64], "kind": "manifest", "budget": 200000},
}

DATASET_KINDS = ("desk", "cifar10", "cifar100", "manifest")


@dataclass(frozen=True)
class DatasetConfig:
    preset: str = None
    kind: str = "desk"
    class_names: tuple = DESK_CLASSES
    shape: tuple = (3, 32, 32)
    train_per_class: int = 500
    test_per_class: int = 250
    root: str = "data"
    # labelled harness data as a manifest (kind "manifest")
    train_manifest: str = None
    test_manifest: str = None
    seed: int = 0

    @property
    def num_classes(self):
        return len(self.class_names)


@dataclass(frozen=True)
class GenerationConfig:
    service_id: str = "stub"
    per_class_count: int = 1000
    inference_steps: int = 50
    native_resolution: int = 64
    base_seed: int = 0
    workers: int = 4
    cache_dir: str = None
    manifest: str = None


@dataclass(frozen=True)
class TargetConfig:
    arch: str = "convnet-s"
    schedule: TrainSchedule = TrainSchedule(epochs=20, initial_lr=0.1)
    checkpoint: str = None
    server_url: str = None
    api_key: str = None
    label_mode: str = "hard"


@dataclass(frozen=True)
class SubstituteConfig:
    arch: str = "convnet-s"
    pretrain: TrainSchedule = TrainSchedule(epochs=10, initial_lr=0.1)
    distill: TrainSchedule = TrainSchedule(epochs=20, initial_lr=0.01, batch_size=64)


@dataclass(frozen=True)
class ServerSection:
    host: str = "127.0.0.1"
    port: int = settings.SERVER_PORT
    client_budget: int = None
    api_keys: tuple = ()
    engine: str = "gunicorn"


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: str = settings.SCHEMA_VERSION
    run_id: str = "run"
    output_dir: str = "runs"
    seeds: tuple = (0,)
    budget: int = 400
    dataset: DatasetConfig = DatasetConfig()
    generation: GenerationConfig = GenerationConfig()
    target: TargetConfig = TargetConfig()
    substitute: SubstituteConfig = SubstituteConfig()
    attacks: tuple = ()
    attack_examples: int = 1000
    sweep_budgets: tuple = ()
    server: ServerSection = ServerSection()

    @property
    def seed(self):
        return self.seeds[0]

    @property
    def run_dir(self):
        return Path(self.output_dir) / self.run_id

    def validate(self):
        if self.schema_version != settings.SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version!r}")
        if self.budget < 0:
            raise ConfigError("budget must be >= 0")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.dataset.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}")
        if self.dataset.num_classes < 2:
            raise ConfigError("dataset needs at least 2 class names")
        if self.target.label_mode not in ("hard", "soft"):
            raise ConfigError("target.label_mode must be 'hard' or 'soft'")
        if list(self.sweep_budgets) != sorted(self.sweep_budgets):
            raise ConfigError("sweep_budgets must be ascending")
        return self

    def to_dict(self):
        return _plain(dataclasses.asdict(self))


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, data, prefix=""):
    if not isinstance(data, dict):
        raise ConfigError(f"'{prefix or 'config'}' must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
    values = {}
    for name, value in data.items():
        f = known[name]
        if dataclasses.is_dataclass(f.type):
            values[name] = _build(f.type, value, f"{prefix}{name}.")
        elif name == "attacks":
            values[name] = tuple(_build(AttackSpec, item, f"{prefix}attacks[{i}].") for i, item in enumerate(value))
        elif isinstance(value, list):
            values[name] = tuple(value)
        else:
            values[name] = value
    try:
        return cls(**values)
    except ShadowforgeError as e:
        raise ConfigError(f"invalid '{prefix.rstrip('.') or 'config'}': {e}") from e
    except TypeError as e:
        raise ConfigError(f"invalid '{prefix.rstrip('.') or 'config'}': {e}") from e


def apply_preset(raw):
    raw = copy.deepcopy(raw)
    dataset = raw.setdefault("dataset", {})
    name = dataset.get("preset")
    if name is None:
        return raw
    if name not in PRESETS:
        raise ConfigError(f"unknown dataset preset '{name}', known: {sorted(PRESETS)}")
    preset = PRESETS[name]
    if "class_names" not in preset and "class_names" not in dataset:
        raise ConfigError(f"dataset preset '{name}' has no built-in vocabulary; set dataset.class_names")
    for key in ("class_names", "shape", "kind"):
        if key in preset:
            dataset.setdefault(key, preset[key])
    raw.setdefault("budget", preset["budget"])
    return raw


def _parse_value(text):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_overrides(raw, overrides):
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"cannot override '{key}': '{part}' is not an object")
            node = child
        node[parts[-1]] = _parse_value(text)
    return raw


def from_dict(raw, overrides=()):
    raw = apply_preset(apply_overrides(raw, overrides))
    return _build(ExperimentConfig, raw).validate()


def load_config(path, overrides=()):
    try:
        with open(path, "r") as f:
            raw = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except ValueError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return from_dict(raw, overrides)


def save_config(config, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return path
