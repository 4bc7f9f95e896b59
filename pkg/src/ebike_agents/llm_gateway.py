"""Chat-completion client with retries, rate limiting and a persistent cache.

The HTTP transport is injectable; tests drive the gateway with scripted
stubs and no network access.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

from .exceptions import ConfigurationError, ProtocolError, TransportError

logger = logging.getLogger(__name__)

API_KEY_ENV = "EBIKE_LLM_API_KEY"
ENDPOINT_ENV = "EBIKE_LLM_ENDPOINT"
DEFAULT_ENDPOINT = "https://api.openai.com/v1/chat/completions"
DEFAULT_MODEL = "gpt-4"
RETRYABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    model_name: str = DEFAULT_MODEL
    temperature: float = 0.0
    max_tokens: int = 256

    def __post_init__(self):
        if not 0.0 <= self.temperature <= 1.0:
            raise ValueError(f"temperature must lie in [0, 1], got {self.temperature}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")

    @property
    def request_key(self) -> str:
        payload = json.dumps([self.prompt, self.model_name, float(self.temperature)],
                             ensure_ascii=False)
        return _sha256(payload)

    def body(self) -> dict:
        return {
            "model": self.model_name,
            "messages": [{"role": "user", "content": self.prompt}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class CompletionResult:
    text: str
    from_cache: bool
    latency_ms: int
    attempts: int


@dataclass(frozen=True)
class HttpResponse:
    status: int
    body: str


class Transport(Protocol):
    def post(self, url: str, headers: dict, body: dict, timeout: float) -> HttpResponse:
        """Send one request; raise ``OSError`` on connection failure."""


class RequestsTransport:
    def __init__(self):
        import requests

        self._session = requests.Session()

    def post(self, url, headers, body, timeout):
        import requests

        try:
            resp = self._session.post(url, headers=headers, json=body, timeout=timeout)
        except requests.RequestException as exc:
            raise ConnectionError(str(exc)) from exc
        return HttpResponse(resp.status_code, resp.text)


@dataclass
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 1.0
    max_delay: float = 30.0
    max_in_flight: int = 4
    requests_per_minute: float = 60.0
    timeout: float = 60.0

    def backoff(self, attempt: int) -> float:
        """Delay before retry number ``attempt`` (1-based)."""
        return min(self.max_delay, self.base_delay * 2 ** (attempt - 1))


class RateLimiter:
    """Spaces request starts at least ``60 / rpm`` seconds apart."""

    def __init__(self, requests_per_minute: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.interval = 60.0 / requests_per_minute if requests_per_minute > 0 else 0.0
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next = None

    def acquire(self) -> float:
        """Block until a slot is free; returns the time waited."""
        if self.interval <= 0:
            return 0.0
        with self._lock:
            now = self._clock()
            start = now if self._next is None else max(now, self._next)
            self._next = start + self.interval
        wait = start - now
        if wait > 0:
            self._sleep(wait)
        return wait


@dataclass(frozen=True)
class CacheStats:
    entries: int
    hits: int
    misses: int


class ResponseCache:
    """Append-only JSONL store of completions keyed by request key.

    ``path=None`` keeps entries in memory only.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, str] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self):
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    self._entries.setdefault(row["request_key"], row["text"])
                except (json.JSONDecodeError, KeyError, TypeError):
                    # a torn final line from an interrupted run is skipped
                    logger.warning("%s:%d: skipping malformed cache line", self.path, lineno)

    def get(self, key: str) -> str | None:
        with self._lock:
            text = self._entries.get(key)
            if text is None:
                self.misses += 1
            else:
                self.hits += 1
            return text

    def put(self, request: CompletionRequest, text: str) -> bool:
        """Store ``text``; returns False if the key was already present."""
        key = request.request_key
        with self._lock:
            if key in self._entries:
                return False
            self._entries[key] = text
            if self.path is not None:
                row = {
                    "request_key": key,
                    "model": request.model_name,
                    "prompt_sha": _sha256(request.prompt),
                    "text": text,
                    "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
                }
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(row, ensure_ascii=False) + "\n")
            return True

    def __contains__(self, key):
        with self._lock:
            return key in self._entries

    def __len__(self):
        with self._lock:
            return len(self._entries)


def cache_stats(cache: ResponseCache) -> CacheStats:
    with cache._lock:
        return CacheStats(len(cache._entries), cache.hits, cache.misses)


def _parse_completion(body: str) -> str:
    try:
        payload = json.loads(body)
        text = payload["choices"][0]["message"]["content"]
    except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"unexpected completion payload: {body[:200]!r}") from exc
    if not isinstance(text, str):
        raise ProtocolError(f"completion content is not text: {text!r}")
    return text


@dataclass
class LLMGateway:
    """Blocking, thread-safe completion client.

    Raises :class:`ConfigurationError` at construction when no credential
    is available, so misconfiguration surfaces before any request.
    """

    endpoint: str
    api_key: str
    cache: ResponseCache = field(default_factory=ResponseCache)
    policy: RetryPolicy = field(default_factory=RetryPolicy)
    transport: Transport | None = None
    sleep: Callable[[float], None] = time.sleep
    clock: Callable[[], float] = time.monotonic

    def __post_init__(self):
        if not self.api_key:
            raise ConfigurationError(f"no API credential; set {API_KEY_ENV}")
        if not self.endpoint:
            raise ConfigurationError(f"no endpoint URL; set {ENDPOINT_ENV}")
        if self.policy.max_attempts < 1:
            raise ConfigurationError("max_attempts must be at least 1")
        if self.transport is None:
            self.transport = RequestsTransport()
        self._slots = threading.BoundedSemaphore(max(1, self.policy.max_in_flight))
        self._limiter = RateLimiter(self.policy.requests_per_minute, self.clock, self.sleep)

    @classmethod
    def from_env(cls, cache=None, policy=None, transport=None, endpoint=None, **kwargs):
        return cls(
            endpoint=endpoint or os.environ.get(ENDPOINT_ENV) or DEFAULT_ENDPOINT,
            api_key=os.environ.get(API_KEY_ENV, ""),
            cache=cache if cache is not None else ResponseCache(),
            policy=policy or RetryPolicy(),
            transport=transport,
            **kwargs,
        )

    def complete(self, request: CompletionRequest) -> CompletionResult:
        if not request.prompt or not request.prompt.strip():
            raise ValueError("prompt is empty")
        started = self.clock()
        key = request.request_key
        cached = self.cache.get(key)
        if cached is not None:
            return CompletionResult(cached, True, 0, 0)

        headers = {"Authorization": f"Bearer {self.api_key}", "Content-Type": "application/json"}
        last_status = None
        last_error = None
        attempts = 0
        for attempt in range(1, self.policy.max_attempts + 1):
            if attempt > 1:
                self.sleep(self.policy.backoff(attempt - 1))
            self._limiter.acquire()
            attempts = attempt
            with self._slots:
                try:
                    resp = self.transport.post(self.endpoint, headers, request.body(),
                                               self.policy.timeout)
                except OSError as exc:
                    last_error = str(exc)
                    last_status = None
                    logger.info("attempt %d: connection error %s", attempt, exc)
                    continue
            last_status = resp.status
            if resp.status == 200:
                text = _parse_completion(resp.body)
                self.cache.put(request, text)
                latency = int(round((self.clock() - started) * 1000))
                return CompletionResult(text, False, max(latency, 0), attempts)
            last_error = resp.body[:200]
            if resp.status not in RETRYABLE_STATUS:
                break
            logger.info("attempt %d: HTTP %d", attempt, resp.status)
        raise TransportError(
            f"completion failed after {attempts} attempt(s): status={last_status} {last_error or ''}".strip(),
            status=last_status,
            attempts=attempts,
        )
