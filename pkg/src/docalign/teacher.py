"""Client for an OpenAI-compatible teacher endpoint.

Every completion and embedding request is content-addressed: the SHA-256
of (endpoint kind, model id, decode parameters, messages) keys a disk
cache, so reruns of a finished pipeline stage perform zero network
calls and generation stays reproducible against a deterministic server.
Transient failures (429, 5xx, transport errors) retry on a deterministic
exponential backoff; other 4xx fail immediately.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import httpx

logger = logging.getLogger(__name__)

_ROLES = ("system", "user", "assistant")
_MODES = ("greedy", "nucleus")


class TeacherError(Exception):
    """Base class for teacher endpoint failures. Carries the request
    hash so a failed call can be matched to its cache entry."""

    def __init__(self, message: str, request_hash: str | None = None):
        super().__init__(message)
        self.request_hash = request_hash


class TeacherRequestError(TeacherError):
    """Non-retryable client-side rejection (4xx other than 429)."""


class TeacherExhaustedError(TeacherError):
    """Retry budget spent on transient failures."""


class TeacherResponseError(TeacherError):
    """The endpoint answered 200 with a body we cannot use."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in _ROLES:
            raise ValueError(f"role must be one of {_ROLES}, got {self.role!r}")
        if not isinstance(self.content, str) or not self.content:
            raise ValueError("content must be a non-empty string")


@dataclass(frozen=True)
class DecodeParams:
    """Decoding mode plus sampler settings. Greedy requests are sent
    with temperature 0 and no nucleus fields."""

    mode: str
    temperature: float = 1.0
    top_p: float = 0.9
    max_tokens: int = 512
    seed: int | None = None

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.mode == "nucleus":
            if not (0.0 < self.temperature <= 2.0):
                raise ValueError("nucleus temperature must be in (0, 2]")
            if not (0.0 < self.top_p <= 1.0):
                raise ValueError("top_p must be in (0, 1]")

    @classmethod
    def greedy(cls, max_tokens: int = 512) -> "DecodeParams":
        return cls(mode="greedy", max_tokens=max_tokens)

    @classmethod
    def nucleus(
        cls,
        temperature: float = 1.0,
        top_p: float = 0.9,
        max_tokens: int = 512,
        seed: int | None = None,
    ) -> "DecodeParams":
        return cls(mode="nucleus", temperature=temperature, top_p=top_p, max_tokens=max_tokens, seed=seed)

    def payload_fields(self) -> dict:
        if self.mode == "greedy":
            fields: dict = {"temperature": 0.0, "max_tokens": self.max_tokens}
        else:
            fields = {
                "temperature": self.temperature,
                "top_p": self.top_p,
                "max_tokens": self.max_tokens,
            }
        if self.seed is not None:
            fields["seed"] = self.seed
        return fields


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    base_backoff_ms: int = 250

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.base_backoff_ms < 0:
            raise ValueError("base_backoff_ms must be >= 0")

    def backoff_s(self, attempt: int) -> float:
        """Deterministic schedule: base * 2^attempt, no jitter."""
        return (self.base_backoff_ms / 1000.0) * (2**attempt)


@dataclass(frozen=True)
class TeacherConfig:
    base_url: str
    model_id: str
    api_key_env: str = "TEACHER_API_KEY"
    max_concurrency: int = 4
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    cache_dir: str | None = None
    timeout_s: float = 60.0
    embed_model_id: str | None = None

    def __post_init__(self):
        if not self.base_url:
            raise ValueError("base_url must be non-empty")
        if not self.model_id:
            raise ValueError("model_id must be non-empty")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        object.__setattr__(self, "base_url", self.base_url.rstrip("/"))


class TeacherClient:
    """Thread-safe client with a disk cache and usage accounting.

    A custom httpx transport can be injected for tests; the ``sleeper``
    hook replaces time.sleep so backoff schedules are assertable.
    """

    def __init__(self, config: TeacherConfig, transport=None, sleeper=time.sleep):
        self.config = config
        self._sleep = sleeper
        self._lock = threading.Lock()
        self.network_calls = 0
        self.cache_hits = 0
        self.usage = {"prompt_tokens": 0, "completion_tokens": 0}
        headers = {}
        api_key = os.environ.get(config.api_key_env or "", "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._http = httpx.Client(
            timeout=config.timeout_s, transport=transport, headers=headers
        )
        if config.cache_dir:
            Path(config.cache_dir).mkdir(parents=True, exist_ok=True)

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "TeacherClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # === Public API ===

    def chat_complete(
        self, messages: Sequence[ChatMessage], params: DecodeParams, cache_salt: str = ""
    ) -> str:
        """Return the assistant message text for one chat completion."""
        if not messages:
            raise ValueError("messages must be non-empty")
        payload = {
            "model": self.config.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            **params.payload_fields(),
        }
        key = self._request_hash("chat", payload, cache_salt)
        cached = self._cache_read(key)
        if cached is not None:
            return self._extract_chat_text(cached, key)
        body = self._post_with_retry("/v1/chat/completions", payload, key)
        text = self._extract_chat_text(body, key)
        self._account_usage(body)
        self._cache_write(key, payload, body)
        return text

    def chat_complete_many(
        self, batch: Sequence[tuple[Sequence[ChatMessage], DecodeParams]]
    ) -> list[str]:
        """Run chat completions concurrently (bounded by the config's
        ceiling); results come back in submission order regardless of
        completion order."""
        if not batch:
            return []
        with ThreadPoolExecutor(max_workers=self.config.max_concurrency) as pool:
            futures = [pool.submit(self.chat_complete, msgs, params) for msgs, params in batch]
            return [f.result() for f in futures]

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        """Embed a batch of texts; vectors come back aligned to input
        order with uniform dimension."""
        if not texts:
            raise ValueError("empty batch: embed needs at least one text")
        if any(not isinstance(t, str) or not t for t in texts):
            raise ValueError("every text must be a non-empty string")
        payload = {
            "model": self.config.embed_model_id or self.config.model_id,
            "input": list(texts),
        }
        key = self._request_hash("embed", payload, "")
        body = self._cache_read(key)
        if body is None:
            body = self._post_with_retry("/v1/embeddings", payload, key)
            self._account_usage(body)
            self._cache_write(key, payload, body)
        try:
            data = sorted(body["data"], key=lambda d: d["index"])
            vectors = [[float(x) for x in d["embedding"]] for d in data]
        except (KeyError, TypeError, ValueError) as exc:
            raise TeacherResponseError(f"malformed embeddings response: {exc}", key) from None
        if len(vectors) != len(texts):
            raise TeacherResponseError("embedding count does not match input count", key)
        dims = {len(v) for v in vectors}
        if len(dims) != 1 or 0 in dims:
            raise TeacherResponseError(f"non-uniform embedding dimensions: {sorted(dims)}", key)
        return vectors

    # === Internals ===

    def _request_hash(self, kind: str, payload: dict, cache_salt: str) -> str:
        material = {"kind": kind, "payload": payload}
        if cache_salt:
            material["salt"] = cache_salt
        canonical = json.dumps(material, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def _cache_path(self, key: str) -> Path | None:
        if not self.config.cache_dir:
            return None
        return Path(self.config.cache_dir) / f"{key}.json"

    def _cache_read(self, key: str) -> dict | None:
        path = self._cache_path(key)
        if path is None or not path.exists():
            return None
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
            body = entry["response"]
        except (json.JSONDecodeError, KeyError) as exc:
            logger.warning("dropping unreadable cache entry %s: %s", path.name, exc)
            return None
        with self._lock:
            self.cache_hits += 1
        return body

    def _cache_write(self, key: str, payload: dict, body: dict) -> None:
        path = self._cache_path(key)
        if path is None:
            return
        tmp = path.with_suffix(".tmp")
        tmp.write_text(
            json.dumps({"request": payload, "response": body}, ensure_ascii=False), encoding="utf-8"
        )
        os.replace(tmp, path)

    def _post_with_retry(self, endpoint: str, payload: dict, key: str) -> dict:
        url = self.config.base_url + endpoint
        attempts = self.config.retry.max_attempts
        last_failure = ""
        for attempt in range(attempts):
            if attempt > 0:
                self._sleep(self.config.retry.backoff_s(attempt - 1))
            with self._lock:
                self.network_calls += 1
            try:
                response = self._http.post(url, json=payload)
            except httpx.HTTPError as exc:
                last_failure = f"transport error: {exc}"
                logger.warning("teacher request %s attempt %d/%d failed: %s", key[:12], attempt + 1, attempts, last_failure)
                continue
            if response.status_code == 200:
                try:
                    return response.json()
                except json.JSONDecodeError as exc:
                    raise TeacherResponseError(f"response is not JSON: {exc}", key) from None
            if response.status_code == 429 or response.status_code >= 500:
                last_failure = f"status {response.status_code}"
                logger.warning("teacher request %s attempt %d/%d failed: %s", key[:12], attempt + 1, attempts, last_failure)
                continue
            raise TeacherRequestError(
                f"teacher rejected request ({response.status_code}): {response.text[:200]}", key
            )
        raise TeacherExhaustedError(
            f"gave up after {attempts} attempts; last failure: {last_failure}", key
        )

    def _extract_chat_text(self, body: dict, key: str) -> str:
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise TeacherResponseError("malformed chat completion response", key) from None
        if not isinstance(text, str):
            raise TeacherResponseError("completion content is not a string", key)
        return text

    def _account_usage(self, body: dict) -> None:
        usage = body.get("usage") or {}
        with self._lock:
            self.usage["prompt_tokens"] += int(usage.get("prompt_tokens", 0) or 0)
            self.usage["completion_tokens"] += int(usage.get("completion_tokens", 0) or 0)

    def usage_totals(self) -> dict:
        with self._lock:
            return {
                **self.usage,
                "network_calls": self.network_calls,
                "cache_hits": self.cache_hits,
            }
