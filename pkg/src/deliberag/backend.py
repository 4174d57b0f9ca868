"""Embedding and generation backends.

Two implementations share one duck-typed contract (``embed_text``,
``embed_batch``, ``generate``): :class:`OllamaBackend` talks to a local model
server over its REST API, :class:`MockBackend` is fully deterministic and
offline (hash embeddings plus per-role scripted completions).
"""

from __future__ import annotations

import enum
import json
import logging
import os
import re
import threading
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests

from .errors import (
    BackendProtocolError,
    BackendUnreachable,
    ConfigError,
    DimensionMismatch,
    EmptyCompletion,
    EmptyInput,
    ScriptExhausted,
)

log = logging.getLogger(__name__)

BASE_URL_ENV = "DELIBERAG_BASE_URL"

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_NON_ALNUM = re.compile(r"[\W_]+")


class BackendMode(str, enum.Enum):
    LIVE = "live"
    MOCK = "mock"


@dataclass(frozen=True)
class BackendConfig:
    mode: BackendMode = BackendMode.MOCK
    base_url: str | None = None
    embed_model: str = "mxbai-embed-large"
    gen_model: str = "llama3.2"
    temperature: float = 0.0
    timeout_ms: int = 120_000
    mock_dim: int = 64
    mock_script: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", BackendMode(self.mode))
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.timeout_ms <= 0:
            raise ConfigError("timeout_ms must be positive")
        if self.mock_dim <= 0:
            raise ConfigError("mock_dim must be positive")


@dataclass(frozen=True)
class GenerationRequest:
    system_prompt: str
    user_prompt: str
    temperature: float | None = None  # None: use the backend's configured value
    role_id: str = ""
    # "respond", "rewrite" or "report"; lets scripted backends keep separate queues
    purpose: str = "respond"


@dataclass(frozen=True)
class GenerationResponse:
    text: str
    backend_latency_ms: int = 0


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    return [t for t in _NON_ALNUM.split(text.lower()) if t]


def hash_embed(text: str, dim: int = 64) -> np.ndarray:
    """Bag-of-words feature hashing with unsigned counts, L2-normalized.

    Each lowercase alphanumeric token lands in bucket ``fnv1a_64(token) % dim``.
    """
    if dim <= 0:
        raise ValueError("dim must be positive")
    tokens = tokenize(text or "")
    if not tokens:
        raise EmptyInput("text has no alphanumeric tokens")
    vec = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        vec[fnv1a_64(tok.encode("utf-8")) % dim] += 1.0
    return vec / np.linalg.norm(vec)


def _check_text(text) -> None:
    if not isinstance(text, str) or not text.strip():
        raise EmptyInput("text must be a non-empty string")


def _check_request(request: GenerationRequest) -> None:
    if not request.system_prompt.strip() or not request.user_prompt.strip():
        raise EmptyInput("generation prompts must be non-empty")


def load_script(path) -> dict[str, list[str]]:
    """Read a mock script: JSON object mapping a role id to a list of responses."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read mock script {path}: {exc}") from exc
    if not isinstance(data, dict) or not all(
        isinstance(v, list) and all(isinstance(s, str) for s in v) for v in data.values()
    ):
        raise ConfigError(f"mock script {path}: expected an object of role id -> list of strings")
    return data


class MockBackend:
    """Deterministic offline backend.

    Generation replays per-role FIFO queues. A request for role ``R`` with
    purpose ``P`` reads from queue ``"R:P"`` when the script defines it, and
    from queue ``"R"`` otherwise.
    """

    mode = BackendMode.MOCK

    def __init__(self, dim: int = 64, script: dict[str, list[str]] | None = None):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._queues = {k: deque(v) for k, v in (script or {}).items()}
        self._lock = threading.Lock()

    def embed_text(self, text: str) -> np.ndarray:
        _check_text(text)
        return hash_embed(text, self.dim)

    def embed_batch(self, texts) -> list[np.ndarray]:
        return _embed_each(self, texts)

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        _check_request(request)
        qualified = f"{request.role_id}:{request.purpose}"
        key = qualified if qualified in self._queues else request.role_id
        with self._lock:
            queue = self._queues.get(key)
            if not queue:
                raise ScriptExhausted(f"no scripted response left for {key!r}")
            text = queue.popleft()
        if not text.strip():
            raise EmptyCompletion(f"scripted response for {key!r} is empty")
        return GenerationResponse(text=text, backend_latency_ms=0)

    def remaining(self, key: str) -> int:
        with self._lock:
            return len(self._queues.get(key, ()))


def _embed_each(backend, texts) -> list[np.ndarray]:
    out = []
    for i, text in enumerate(texts):
        try:
            out.append(backend.embed_text(text))
        except (EmptyInput, DimensionMismatch, BackendProtocolError, BackendUnreachable) as exc:
            raise type(exc)(f"batch item {i}: {exc}") from exc
    return out


class OllamaBackend:
    """Client for an Ollama-compatible model server."""

    mode = BackendMode.LIVE

    def __init__(
        self,
        base_url: str,
        embed_model: str = "mxbai-embed-large",
        gen_model: str = "llama3.2",
        temperature: float = 0.0,
        timeout_ms: int = 120_000,
        retry_base_s: float = 0.5,
        max_attempts: int = 2,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.embed_model = embed_model
        self.gen_model = gen_model
        self.temperature = temperature
        self.timeout_ms = timeout_ms
        self.retry_base_s = retry_base_s
        self.max_attempts = max_attempts
        self.dim: int | None = None
        self._session = session or requests.Session()
        self._dim_lock = threading.Lock()

    def _post(self, endpoint: str, body: dict) -> dict:
        url = f"{self.base_url}{endpoint}"
        delay = self.retry_base_s
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self._session.post(url, json=body, timeout=self.timeout_ms / 1000.0)
                break
            except (requests.ConnectionError, requests.Timeout) as exc:
                if attempt == self.max_attempts:
                    raise BackendUnreachable(
                        f"cannot reach {url} (timeout {self.timeout_ms} ms, {attempt} attempts): {exc}"
                    ) from exc
                log.warning("model server %s unreachable, retrying in %.1fs", url, delay)
                time.sleep(delay)
                delay *= 2
        if resp.status_code != 200:
            raise BackendProtocolError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            payload = resp.json()
        except ValueError as exc:
            raise BackendProtocolError(f"{url}: response is not JSON: {resp.text[:200]}") from exc
        if not isinstance(payload, dict):
            raise BackendProtocolError(f"{url}: expected a JSON object: {resp.text[:200]}")
        return payload

    def embed_text(self, text: str) -> np.ndarray:
        _check_text(text)
        payload = self._post("/api/embeddings", {"model": self.embed_model, "prompt": text})
        raw = payload.get("embedding")
        if not isinstance(raw, list) or not raw:
            raise BackendProtocolError(f"/api/embeddings: missing or empty 'embedding': {str(payload)[:200]}")
        try:
            vec = np.asarray(raw, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise BackendProtocolError(f"/api/embeddings: non-numeric embedding: {exc}") from exc
        if vec.ndim != 1 or not np.all(np.isfinite(vec)):
            raise BackendProtocolError("/api/embeddings: embedding must be a flat list of finite numbers")
        with self._dim_lock:
            if self.dim is None:
                self.dim = vec.size
            elif vec.size != self.dim:
                raise DimensionMismatch(f"embedding has dim {vec.size}, expected {self.dim}")
        return vec

    def embed_batch(self, texts) -> list[np.ndarray]:
        return _embed_each(self, texts)

    def generate(self, request: GenerationRequest) -> GenerationResponse:
        _check_request(request)
        body = {
            "model": self.gen_model,
            "system": request.system_prompt,
            "prompt": request.user_prompt,
            "stream": False,
            "options": {"temperature": self.temperature if request.temperature is None else request.temperature},
        }
        t0 = time.perf_counter()
        payload = self._post("/api/generate", body)
        latency = int((time.perf_counter() - t0) * 1000)
        text = payload.get("response")
        if not isinstance(text, str):
            raise BackendProtocolError(f"/api/generate: missing 'response': {str(payload)[:200]}")
        if not text.strip():
            raise EmptyCompletion("model server returned an empty completion")
        return GenerationResponse(text=text, backend_latency_ms=latency)


def make_backend(config: BackendConfig):
    if config.mode is BackendMode.MOCK:
        script = load_script(config.mock_script) if config.mock_script else {}
        return MockBackend(config.mock_dim, script)
    base_url = os.environ.get(BASE_URL_ENV) or config.base_url
    if not base_url:
        raise ConfigError(f"live backend requires base_url (or {BASE_URL_ENV})")
    return OllamaBackend(
        base_url,
        embed_model=config.embed_model,
        gen_model=config.gen_model,
        temperature=config.temperature,
        timeout_ms=config.timeout_ms,
    )
