"""Pay-per-query MLaaS simulator.

A trained classifier is served behind a label-only HTTP API so the attack
can run across a process boundary. Django is configured standalone (no
project directory, no database); Django REST framework handles the views.

    POST /v1/predict   {"shape": [N, C, H, W], "data": [...]} -> {"labels": [...]} | {"probs": [[...]]}
    GET  /v1/stats     {"queries_served": n, "requests_served": m}
    GET  /healthz      {"status": "ok"}
"""
import logging
import math
import signal
import threading
from dataclasses import dataclass

import django
import numpy as np
import torch
from django.conf import settings as django_settings

import settings
from errors import ChecksumError, InvalidInputError, StartupError

if not django_settings.configured:
    django_settings.configure(
        DEBUG=False,
        SECRET_KEY="shadowforge-mlaas-simulator",
        ALLOWED_HOSTS=["*"],
        ROOT_URLCONF=__name__,
        INSTALLED_APPS=["rest_framework"],
        MIDDLEWARE=[],
        DATABASES={},
        USE_TZ=True,
        DATA_UPLOAD_MAX_MEMORY_SIZE=None,
        REST_FRAMEWORK={
            "DEFAULT_AUTHENTICATION_CLASSES": [],
            "DEFAULT_PERMISSION_CLASSES": [],
            "UNAUTHENTICATED_USER": None,
            "DEFAULT_RENDERER_CLASSES": ["rest_framework.renderers.JSONRenderer"],
            "DEFAULT_PARSER_CLASSES": ["rest_framework.parsers.JSONParser"],
        },
    )
    django.setup()

from django.core.wsgi import get_wsgi_application  # noqa: E402
from django.urls import path  # noqa: E402
from rest_framework import status  # noqa: E402
from rest_framework.response import Response  # noqa: E402
from rest_framework.views import APIView  # noqa: E402

from model_zoo import load, predict_logits  # noqa: E402

logger = logging.getLogger(__name__)

MODES = ("hard", "soft")
ANONYMOUS = "-"


def encode_predict_payload(batch):
    """Request body with every float written to 9 significant digits (exact for float32)."""
    array = np.ascontiguousarray(torch.as_tensor(batch).detach().cpu().numpy(), dtype=np.float32)
    values = ",".join(f"{v:.9g}" for v in array.ravel().tolist())
    shape = ",".join(str(d) for d in array.shape)
    return f'{{"shape":[{shape}],"data":[{values}]}}'.encode("utf-8")


def decode_predict_payload(body, input_shape):
    if not isinstance(body, dict) or "shape" not in body or "data" not in body:
        raise InvalidInputError("payload must be an object with 'shape' and 'data'")
    shape = body["shape"]
    if not isinstance(shape, list) or len(shape) != 4 or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise InvalidInputError("shape must be [N, C, H, W]")
    if tuple(shape[1:]) != tuple(input_shape):
        raise InvalidInputError(f"model expects images of shape {list(input_shape)}, got {shape[1:]}")
    data = body["data"]
    if not isinstance(data, list) or len(data) != math.prod(shape):
        raise InvalidInputError("data length does not match shape")
    try:
        array = np.asarray(data, dtype=np.float64).astype(np.float32)
    except (TypeError, ValueError):
        raise InvalidInputError("data must be a flat list of numbers") from None
    if not np.all(np.isfinite(array)) or array.size and (array.min() < 0.0 or array.max() > 1.0):
        raise InvalidInputError("pixel values must lie in [0, 1]")
    return torch.from_numpy(array.reshape(shape))


@dataclass(frozen=True)
class ServerConfig:
    checkpoint: str
    host: str = "127.0.0.1"
    port: int = settings.SERVER_PORT
    mode: str = "hard"
    client_budget: int = None
    api_keys: tuple = ()
    threads: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"server mode must be one of {MODES}, got '{self.mode}'")
        if self.client_budget is not None and self.client_budget < 0:
            raise InvalidInputError("client_budget must be non-negative")
        object.__setattr__(self, "api_keys", tuple(self.api_keys))


class ServerState:
    def __init__(self, model, mode="hard", client_budget=None, api_keys=()):
        self.model = model.eval()
        self.mode = mode
        self.client_budget = client_budget
        self.api_keys = frozenset(api_keys)
        self.queries_served = 0
        self.requests_served = 0
        self._spent = {}
        self._lock = threading.Lock()

    @property
    def input_shape(self):
        return self.model.spec.input_shape

    def charge(self, client, n):
        """Atomically debit ``n`` images from the client's budget; False if it would overspend."""
        with self._lock:
            spent = self._spent.get(client, 0)
            if self.client_budget is not None and spent + n > self.client_budget:
                return False
            self._spent[client] = spent + n
            return True

    def refund(self, client, n):
        with self._lock:
            self._spent[client] -= n

    def record(self, n):
        with self._lock:
            self.queries_served += n
            self.requests_served += 1

    def stats(self):
        with self._lock:
            return {"queries_served": self.queries_served, "requests_served": self.requests_served}


_state = None


def _current_state():
    if _state is None:
        raise StartupError("server state is not initialized; call create_app first")
    return _state


class PredictView(APIView):
    def post(self, request):
        state = _current_state()
        client = ANONYMOUS
        if state.api_keys:
            client = request.headers.get("X-Api-Key", "")
            if client not in state.api_keys:
                return Response({"error": "unauthorized"}, status=status.HTTP_401_UNAUTHORIZED)
        try:
            batch = decode_predict_payload(request.data, state.input_shape)
        except InvalidInputError as e:
            return Response({"error": "invalid_input", "detail": str(e)}, status=status.HTTP_400_BAD_REQUEST)
        n = len(batch)
        if not state.charge(client, n):
            return Response({"error": "budget_exhausted"}, status=status.HTTP_429_TOO_MANY_REQUESTS)
        try:
            logits = predict_logits(state.model, batch)
        except Exception:
            state.refund(client, n)
            raise
        state.record(n)
        if state.mode == "soft":
            probs = torch.softmax(logits.double(), dim=1)
            return Response({"probs": probs.tolist()})
        return Response({"labels": logits.argmax(dim=1).tolist()})


class StatsView(APIView):
    def get(self, request):
        return Response(_current_state().stats())


class HealthView(APIView):
    def get(self, request):
        return Response({"status": "ok"})


urlpatterns = [
    path("v1/predict", PredictView.as_view()),
    path("v1/stats", StatsView.as_view()),
    path("healthz", HealthView.as_view()),
]


def load_state(config):
    try:
        model = load(config.checkpoint)
    except (OSError, ChecksumError, KeyError, ValueError) as e:
        raise StartupError(f"cannot load checkpoint {config.checkpoint}: {e}") from e
    return ServerState(model, config.mode, config.client_budget, config.api_keys)


def create_app(state):
    """Install ``state`` (a ServerState or ServerConfig) and return the WSGI application."""
    global _state
    if isinstance(state, ServerConfig):
        state = load_state(state)
    _state = state
    return get_wsgi_application()


def make_server(config_or_state, host=None, port=None):
    """Bind a threaded Django WSGI server without starting it. Port 0 picks a free port."""
    from django.core.servers.basehttp import ThreadedWSGIServer, WSGIRequestHandler

    app = create_app(config_or_state)
    if isinstance(config_or_state, ServerConfig):
        host = host or config_or_state.host
        port = config_or_state.port if port is None else port
    host = host or "127.0.0.1"
    port = settings.SERVER_PORT if port is None else port
    try:
        server = ThreadedWSGIServer((host, port), WSGIRequestHandler, allow_reuse_address=False)
    except OSError as e:
        raise StartupError(f"cannot bind {host}:{port}: {e}") from e
    server.daemon_threads = True
    server.set_app(app)
    return server


def _serve_builtin(config):
    server = make_server(config)
    logger.info("MLaaS simulator (%s labels) listening on %s:%d", config.mode, *server.server_address[:2])

    def stop(signum, frame):
        logger.info("Received signal %d, shutting down", signum)
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    try:
        server.serve_forever()
    finally:
        server.server_close()


def _serve_gunicorn(config):
    from gunicorn.app.base import BaseApplication

    class MlaasApplication(BaseApplication):
        def __init__(self, application, options):
            self.application = application
            self.options = options
            super().__init__()

        def load_config(self):
            for key, value in self.options.items():
                self.cfg.set(key, value)

        def load(self):
            return self.application

    # one worker keeps the stats and budget counters in a single process
    options = {
        "bind": f"{config.host}:{config.port}",
        "workers": 1,
        "worker_class": "gthread",
        "threads": config.threads,
        "graceful_timeout": 10,
    }
    app = create_app(config)
    logger.info("MLaaS simulator (%s labels) starting on %s", config.mode, options["bind"])
    try:
        MlaasApplication(app, options).run()
    except SystemExit as e:
        if e.code:
            raise StartupError(f"server exited with status {e.code} (bind {options['bind']})") from e


def serve(config, engine="gunicorn"):
    """Run until SIGTERM/SIGINT. Startup failures raise StartupError."""
    if engine == "gunicorn":
        _serve_gunicorn(config)
    elif engine == "builtin":
        _serve_builtin(config)
    else:
        raise InvalidInputError(f"unknown server engine '{engine}'")
