"""Synthetic class-conditional image pools.

Prompts are built from a class vocabulary, images come from a text-to-image
backend (a remote HTTP service or the deterministic local stub), are cached
on disk by request key, and are recorded in a manifest that backs the
pretraining set.
"""
import base64
import hashlib
import io
import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from pathlib import Path

import numpy as np
import requests
import torch
from PIL import Image

import settings
from datasets import STUB_DOMAIN, LabeledSet, render_pattern
from errors import GenerationError, InvalidInputError

logger = logging.getLogger(__name__)

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
IMAGENETTE_CLASSES = (
    "tench", "English springer", "cassette player", "chain saw", "church",
    "French horn", "garbage truck", "gas pump", "golf ball", "parachute",
)
CIFAR100_CLASSES = (
    "apple", "aquarium fish", "baby", "bear", "beaver", "bed", "bee", "beetle", "bicycle", "bottle",
    "bowl", "boy", "bridge", "bus", "butterfly", "camel", "can", "castle", "caterpillar", "cattle",
    "chair", "chimpanzee", "clock", "cloud", "cockroach", "couch", "crab", "crocodile", "cup", "dinosaur",
    "dolphin", "elephant", "flatfish", "forest", "fox", "girl", "hamster", "house", "kangaroo", "keyboard",
    "lamp", "lawn mower", "leopard", "lion", "lizard", "lobster", "man", "maple tree", "motorcycle", "mountain",
    "mouse", "mushroom", "oak tree", "orange", "orchid", "otter", "palm tree", "pear", "pickup truck", "pine tree",
    "plain", "plate", "poppy", "porcupine", "possum", "rabbit", "raccoon", "ray", "road", "rocket",
    "rose", "sea", "seal", "shark", "shrew", "skunk", "skyscraper", "snail", "snake", "spider",
    "squirrel", "streetcar", "sunflower", "sweet pepper", "table", "tank", "telephone", "television", "tiger",
    "tractor", "train", "trout", "tulip", "turtle", "wardrobe", "whale", "willow tree", "wolf", "woman", "worm",
)
# ten-class ImageNet subsets
IMAGEFRUIT_CLASSES = (
    "pineapple", "banana", "strawberry", "orange", "lemon",
    "pomegranate", "fig", "bell pepper", "cucumber", "Granny Smith apple",
)
IMAGEYELLOW_CLASSES = (
    "bee", "yellow lady's slipper", "banana", "lemon", "corn",
    "school bus", "honeycomb", "lion", "garden spider", "goldfinch",
)
IMAGESQUAWK_CLASSES = (
    "peacock", "flamingo", "macaw", "pelican", "king penguin",
    "bald eagle", "toucan", "ostrich", "black swan", "sulphur-crested cockatoo",
)
DESK_CLASSES = ("ring", "stripe", "wave", "lattice")


@dataclass(frozen=True)
class ClassVocabulary:
    names: tuple

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise InvalidInputError("class vocabulary is empty")
        if len(set(names)) != len(names):
            raise InvalidInputError(f"class names must be unique: {list(names)}")

    def __len__(self):
        return len(self.names)

    def index_of(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise InvalidInputError(f"'{name}' is not in the vocabulary") from None


def build_prompts(vocab):
    names = vocab.names if isinstance(vocab, ClassVocabulary) else tuple(vocab)
    if not names:
        raise InvalidInputError("cannot build prompts for an empty vocabulary")
    return [settings.PROMPT_TEMPLATE.format(name) for name in names]


@dataclass(frozen=True)
class GenerationRequest:
    prompt: str
    class_index: int
    seed: int
    inference_steps: int = 50
    native_resolution: int = 512
    service_id: str = "stub"
    channels: int = 3

    def __post_init__(self):
        if self.inference_steps < 1:
            raise InvalidInputError("inference_steps must be >= 1")
        if self.seed < 0:
            raise InvalidInputError("seed must be unsigned")
        if self.native_resolution < 1:
            raise InvalidInputError("native_resolution must be positive")

    def cache_key(self):
        payload = {
            "prompt": self.prompt,
            "seed": self.seed,
            "service_id": self.service_id,
            "inference_steps": self.inference_steps,
            "width": self.native_resolution,
            "height": self.native_resolution,
            "channels": self.channels,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RequestDefaults:
    inference_steps: int = 50
    native_resolution: int = 512
    base_seed: int = 0
    channels: int = 3


def stub_generate(class_index, seed, shape):
    """Deterministic stand-in for the diffusion service. Returns C×H×W floats in [0, 1]."""
    rng = np.random.default_rng([seed, class_index])
    return render_pattern(class_index, tuple(shape), rng, STUB_DOMAIN)


@lru_cache(maxsize=32)
def _area_weights(source, target):
    # row i averages source interval [i*s/t, (i+1)*s/t) weighted by overlap
    weights = np.zeros((target, source))
    scale = source / target
    for i in range(target):
        start, stop = i * scale, (i + 1) * scale
        for j in range(int(np.floor(start)), min(int(np.ceil(stop)), source)):
            overlap = min(stop, j + 1) - max(start, j)
            if overlap > 0:
                weights[i, j] = overlap
    return weights / weights.sum(axis=1, keepdims=True)


def resize_to_target(image, target_hw):
    """Area-average downscale of an H×W or C×H×W image."""
    image = np.asarray(image, dtype=np.float64)
    if isinstance(target_hw, int):
        target_hw = (target_hw, target_hw)
    height, width = image.shape[-2:]
    th, tw = target_hw
    if th > height or tw > width:
        raise InvalidInputError(f"cannot upscale {height}x{width} to {th}x{tw}")
    if (th, tw) == (height, width):
        return np.clip(image.copy(), 0.0, 1.0)
    rows = _area_weights(height, th)
    cols = _area_weights(width, tw)
    resized = rows @ image @ cols.T
    return np.clip(resized, 0.0, 1.0)


def encode_png(image):
    """C×H×W floats in [0, 1] to lossless 8-bit PNG bytes."""
    array = np.round(np.clip(np.asarray(image), 0.0, 1.0) * 255.0).astype(np.uint8)
    if array.shape[0] == 1:
        pil = Image.fromarray(array[0], mode="L")
    else:
        pil = Image.fromarray(np.transpose(array, (1, 2, 0)), mode="RGB")
    buffer = io.BytesIO()
    pil.save(buffer, format="PNG")
    return buffer.getvalue()


def decode_png(data, channels=3):
    pil = Image.open(io.BytesIO(data))
    pil = pil.convert("L" if channels == 1 else "RGB")
    array = np.asarray(pil, dtype=np.float64) / 255.0
    if array.ndim == 2:
        return array[None, :, :]
    return np.transpose(array, (2, 0, 1))


class ImageCache:
    """Content-addressed store: <root>/<first 2 hex of key>/<key>.png."""

    def __init__(self, root):
        self.root = Path(root)

    def path_for(self, key):
        return self.root / key[:2] / f"{key}.png"

    def get(self, key):
        path = self.path_for(key)
        if path.exists():
            return path.read_bytes()
        return None

    def put(self, key, data):
        path = self.path_for(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
            os.replace(tmp, path)
        except OSError:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise
        return path


class StubBackend:
    service_id = "stub"

    def __init__(self):
        self.calls = 0
        self._lock = threading.Lock()

    def generate(self, request):
        with self._lock:
            self.calls += 1
        shape = (request.channels, request.native_resolution, request.native_resolution)
        return encode_png(stub_generate(request.class_index, request.seed, shape))


class RemoteBackend:
    """Client for POST {url}/txt2img returning {"image_b64": ...}."""

    service_id = "remote"
    retry_statuses = {429, 500, 502, 503, 504}

    def __init__(self, url=None, token=None, backoff=(1.0, 2.0, 4.0), timeout=120, session=None, sleep=time.sleep):
        self.url = (url or settings.T2I_URL).rstrip("/")
        if not self.url:
            raise InvalidInputError("remote backend needs SHADOWFORGE_T2I_URL or an explicit url")
        self.token = token if token is not None else settings.T2I_TOKEN
        self.backoff = tuple(backoff)
        self.timeout = timeout
        self.session = session or requests.Session()
        self.sleep = sleep
        self.calls = 0
        self._lock = threading.Lock()

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return headers

    def generate(self, request):
        body = {
            "prompt": request.prompt,
            "seed": request.seed,
            "steps": request.inference_steps,
            "width": request.native_resolution,
            "height": request.native_resolution,
        }
        last_error = None
        for attempt in range(len(self.backoff) + 1):
            if attempt:
                delay = self.backoff[attempt - 1]
                logger.warning("Retrying '%s' seed %d in %.0fs (%s)", request.prompt, request.seed, delay, last_error)
                self.sleep(delay)
            with self._lock:
                self.calls += 1
            try:
                resp = self.session.post(f"{self.url}/txt2img", headers=self._headers(), json=body, timeout=self.timeout)
            except requests.RequestException as e:
                last_error = e
                continue
            if resp.status_code in self.retry_statuses:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise GenerationError(
                    f"generation failed for '{request.prompt}' seed {request.seed}: HTTP {resp.status_code}",
                    request=request,
                )
            try:
                return base64.b64decode(resp.json()["image_b64"])
            except (KeyError, ValueError) as e:
                raise GenerationError(
                    f"malformed response for '{request.prompt}' seed {request.seed}: {e}", request=request
                ) from e
        raise GenerationError(
            f"generation failed for '{request.prompt}' seed {request.seed} after {len(self.backoff) + 1} attempts: {last_error}",
            request=request,
        )


def make_backend(service_id, **kwargs):
    if service_id == "stub":
        return StubBackend()
    if service_id == "remote":
        return RemoteBackend(**kwargs)
    raise InvalidInputError(f"unknown generation service '{service_id}'")


@dataclass
class ManifestEntry:
    image_path: Path
    class_index: int
    prompt: str
    seed: int
    service_id: str
    sha256: str


@dataclass
class SyntheticManifest:
    entries: list
    target_shape: tuple
    num_classes: int
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def __len__(self):
        return len(self.entries)

    def class_counts(self):
        counts = [0] * self.num_classes
        for entry in self.entries:
            counts[entry.class_index] += 1
        return counts

    def labels(self):
        return [entry.class_index for entry in self.entries]

    def verify(self):
        for entry in self.entries:
            if not 0 <= entry.class_index < self.num_classes:
                raise InvalidInputError(f"class index {entry.class_index} out of range for {entry.image_path}")
            path = Path(entry.image_path)
            if not path.exists():
                raise InvalidInputError(f"manifest image missing: {path}")
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            if digest != entry.sha256:
                raise InvalidInputError(f"hash mismatch for {path}")

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        entries = []
        for entry in self.entries:
            record = asdict(entry)
            record["image_path"] = os.path.relpath(Path(entry.image_path).resolve(), base)
            entries.append(record)
        data = {
            "schema_version": settings.SCHEMA_VERSION,
            "target_shape": list(self.target_shape),
            "num_classes": self.num_classes,
            "created_at": self.created_at,
            "entries": entries,
        }
        with open(path, "w") as f:
            json.dump(data, f, indent=2, ensure_ascii=False)
        return path

    @classmethod
    def load(cls, path, verify=True):
        path = Path(path)
        with open(path, "r") as f:
            data = json.load(f)
        if data.get("schema_version") != settings.SCHEMA_VERSION:
            raise InvalidInputError(f"unsupported manifest schema_version {data.get('schema_version')!r}")
        base = path.parent.resolve()
        entries = []
        for record in data["entries"]:
            record = dict(record)
            record["image_path"] = (base / record["image_path"]).resolve()
            entries.append(ManifestEntry(**record))
        manifest = cls(entries, tuple(data["target_shape"]), data["num_classes"], data["created_at"])
        if verify:
            manifest.verify()
        return manifest


def _fetch(request, backend, cache):
    key = request.cache_key()
    data = cache.get(key)
    if data is None:
        data = backend.generate(request)
        cache.put(key, data)
    return cache.path_for(key), hashlib.sha256(data).hexdigest()


def generate_pool(vocab, per_class_count, request_defaults, backend, cache=None, target_shape=(3, 32, 32), workers=4):
    """Generate exactly ``per_class_count`` images for every class and return their manifest.

    Images already in the cache are reused without touching the backend.
    A pool either completes or raises; failed requests are never skipped.
    """
    if per_class_count < 1:
        raise InvalidInputError("per_class_count must be >= 1")
    if request_defaults.native_resolution < max(target_shape[1:]):
        raise InvalidInputError("native resolution is below the target resolution")
    cache = cache or ImageCache(settings.CACHE_DIR)
    prompts = build_prompts(vocab)
    requests_ = []
    for class_index, prompt in enumerate(prompts):
        for j in range(per_class_count):
            entry_index = class_index * per_class_count + j
            requests_.append(GenerationRequest(
                prompt=prompt,
                class_index=class_index,
                seed=request_defaults.base_seed + entry_index,
                inference_steps=request_defaults.inference_steps,
                native_resolution=request_defaults.native_resolution,
                service_id=backend.service_id,
                channels=request_defaults.channels,
            ))

    total = len(requests_)
    logger.info("Generating pool: %d classes x %d images via %s", len(prompts), per_class_count, backend.service_id)
    results = [None] * total
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = [pool.submit(_fetch, request, backend, cache) for request in requests_]
        for i, future in enumerate(futures):
            try:
                results[i] = future.result()
            except GenerationError:
                for pending in futures[i + 1:]:
                    pending.cancel()
                raise
            if (i + 1) % max(1, total // 10) == 0 or i + 1 == total:
                logger.info("[%d/%d] Generated: %s", i + 1, total, requests_[i].prompt)

    entries = [
        ManifestEntry(path, request.class_index, request.prompt, request.seed, request.service_id, digest)
        for request, (path, digest) in zip(requests_, results)
    ]
    return SyntheticManifest(entries, tuple(target_shape), len(prompts))


def load_pool(manifest):
    """Decode every manifest image at target resolution; labels are prompt class indices."""
    channels, height, width = manifest.target_shape
    images = np.empty((len(manifest), channels, height, width), dtype=np.float32)
    for i, entry in enumerate(manifest.entries):
        native = decode_png(Path(entry.image_path).read_bytes(), channels)
        images[i] = resize_to_target(native, (height, width))
    labels = torch.as_tensor(manifest.labels(), dtype=torch.long)
    return LabeledSet(torch.from_numpy(images), labels, manifest.num_classes, "synthetic")
