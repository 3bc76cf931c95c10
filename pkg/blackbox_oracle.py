"""The only doorway to the target model.

Every prediction is paid for through a QueryLedger. Oracles hand back hard
labels (top-1) or probability rows and nothing else: no logits in hard
mode, no gradients, no parameters.
"""
import logging
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import requests
import torch

from errors import BudgetExhaustedError, InvalidInputError, ShadowforgeError
from mlaas_server import encode_predict_payload
from model_zoo import predict_logits

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LedgerEntry:
    timestamp: float
    batch_size: int
    purpose: str


class Reservation:
    """Units held by one ledger reservation and how many the target has answered."""

    def __init__(self, n):
        self.n = n
        self.answered = 0

    def answer(self, k):
        self.answered = min(self.n, self.answered + k)


class QueryLedger:
    """Budget Q and the monotone count of images submitted to the target.

    ``budget=None`` makes an unlimited ledger, used for evaluation-phase
    queries that the extraction budget does not cover.
    """

    def __init__(self, budget=None, name="distillation"):
        if budget is not None and budget < 0:
            raise InvalidInputError("query budget must be non-negative")
        self.budget = budget
        self.name = name
        self.used = 0
        self.log = []
        self._pending = 0
        self._lock = threading.Lock()

    @property
    def unlimited(self):
        return self.budget is None

    @property
    def remaining(self):
        if self.budget is None:
            return None
        return self.budget - self.used

    @contextmanager
    def reserve(self, n, purpose):
        """Check-and-hold ``n`` units; commit on success, release on failure.

        Yields a Reservation. Units marked answered before a failure were
        seen by the target, so they are committed even though the block raised.
        """
        if n < 0:
            raise InvalidInputError("cannot reserve a negative number of queries")
        with self._lock:
            if self.budget is not None and self.used + self._pending + n > self.budget:
                raise BudgetExhaustedError(
                    f"{self.name} ledger: {n} queries requested, {self.budget - self.used - self._pending} left "
                    f"of {self.budget}",
                    snapshot=self._snapshot_unlocked(),
                )
            self._pending += n
        hold = Reservation(n)
        try:
            yield hold
        except BaseException:
            with self._lock:
                self._pending -= n
                if hold.answered:
                    self._commit_unlocked(hold.answered, purpose)
            raise
        with self._lock:
            self._pending -= n
            self._commit_unlocked(n, purpose)

    def _commit_unlocked(self, n, purpose):
        self.used += n
        self.log.append(LedgerEntry(time.time(), n, purpose))
        logger.debug("ledger %s: +%d (%s), used %d/%s", self.name, n, purpose, self.used, self.budget)

    def debit(self, n, purpose):
        with self.reserve(n, purpose):
            pass

    def used_by_purpose(self):
        totals = {}
        for entry in self.log:
            totals[entry.purpose] = totals.get(entry.purpose, 0) + entry.batch_size
        return dict(sorted(totals.items()))

    def _snapshot_unlocked(self):
        return {"name": self.name, "budget": self.budget, "used": self.used, "by_purpose": self.used_by_purpose()}

    def snapshot(self):
        """Timestamp-free summary, stable across reruns."""
        with self._lock:
            return self._snapshot_unlocked()

    def dump(self):
        with self._lock:
            data = self._snapshot_unlocked()
            data["log"] = [
                {"timestamp": e.timestamp, "batch_size": e.batch_size, "purpose": e.purpose} for e in self.log
            ]
        return data


def remaining(ledger):
    return ledger.remaining


@dataclass(frozen=True)
class HardLabelResponse:
    labels: list

    def as_tensor(self):
        return torch.as_tensor(self.labels, dtype=torch.long)


@dataclass(frozen=True)
class SoftLabelResponse:
    probabilities: np.ndarray = field(repr=False)

    def as_tensor(self):
        return torch.from_numpy(np.asarray(self.probabilities, dtype=np.float32))

    def argmax(self):
        return np.asarray(self.probabilities).argmax(axis=1).tolist()


class BlackBoxOracle:
    """Shared contract; subclasses implement the two private predictors."""

    def __init__(self, input_shape, num_classes):
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes

    def _check(self, batch):
        batch = torch.as_tensor(batch)
        if batch.ndim != 4 or tuple(batch.shape[1:]) != self.input_shape:
            raise InvalidInputError(f"oracle expects N×{self.input_shape}, got {tuple(batch.shape)}")
        return batch.to(torch.float32)

    def query_hard(self, batch, ledger, purpose):
        batch = self._check(batch)
        with ledger.reserve(len(batch), purpose) as hold:
            labels = self._predict_labels(batch, hold)
        return HardLabelResponse([int(label) for label in labels])

    def query_soft(self, batch, ledger, purpose):
        batch = self._check(batch)
        with ledger.reserve(len(batch), purpose) as hold:
            probs = self._predict_probs(batch, hold)
        return SoftLabelResponse(np.asarray(probs, dtype=np.float64))

    def _predict_labels(self, batch, hold):
        raise NotImplementedError

    def _predict_probs(self, batch, hold):
        raise NotImplementedError


class LocalOracle(BlackBoxOracle):
    """Wraps an in-process classifier. The model itself stays private."""

    def __init__(self, model, batch_size=512):
        super().__init__(model.spec.input_shape, model.spec.num_classes)
        self.__model = model
        self.__batch_size = batch_size

    def __logits(self, batch):
        return predict_logits(self.__model, batch, self.__batch_size)

    def _predict_labels(self, batch, hold):
        return self.__logits(batch).argmax(dim=1).tolist()

    def _predict_probs(self, batch, hold):
        return torch.softmax(self.__logits(batch).double(), dim=1).numpy()


class RemoteOracle(BlackBoxOracle):
    """Client for the MLaaS simulator's /v1/predict endpoint."""

    def __init__(self, url, input_shape, num_classes, api_key=None, chunk_size=256, timeout=60, session=None):
        super().__init__(input_shape, num_classes)
        self.url = url.rstrip("/")
        self.api_key = api_key
        self.chunk_size = chunk_size
        self.timeout = timeout
        self.session = session or requests.Session()

    def _post(self, chunk):
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["X-Api-Key"] = self.api_key
        resp = self.session.post(
            f"{self.url}/v1/predict", data=encode_predict_payload(chunk), headers=headers, timeout=self.timeout
        )
        if resp.status_code == 429:
            raise BudgetExhaustedError("server-side budget exhausted", snapshot=resp.json())
        if resp.status_code != 200:
            raise ShadowforgeError(f"oracle server returned HTTP {resp.status_code}: {resp.text[:200]}")
        return resp.json()

    def _predict(self, batch, hold):
        results = []
        for i in range(0, len(batch), self.chunk_size):
            chunk = batch[i:i + self.chunk_size]
            results.append(self._post(chunk))
            hold.answer(len(chunk))
        return results

    def _predict_labels(self, batch, hold):
        labels = []
        for body in self._predict(batch, hold):
            if "labels" in body:
                labels.extend(body["labels"])
            else:
                labels.extend(np.asarray(body["probs"]).argmax(axis=1).tolist())
        return labels

    def _predict_probs(self, batch, hold):
        rows = []
        for body in self._predict(batch, hold):
            if "probs" not in body:
                raise InvalidInputError("oracle server runs in hard-label mode; soft labels unavailable")
            rows.extend(body["probs"])
        return np.asarray(rows, dtype=np.float64)
