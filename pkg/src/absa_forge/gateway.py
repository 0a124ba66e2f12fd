"""Cache-backed, retrying chat-completion client.

Backends implement ``send(req, ordinal) -> str`` and raise ``TransientError`` for
anything worth retrying (429, 5xx, timeouts) or ``PermanentError`` otherwise.
The gateway owns caching, retries and the in-flight limit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

log = logging.getLogger(__name__)

API_KEY_ENV = "ABSA_FORGE_API_KEY"
DEFAULT_ENDPOINT = "https://api.openai.com"
DEFAULT_MODEL = "gpt-3.5-turbo"

BACKOFF_INITIAL = 1.0
BACKOFF_FACTOR = 2.0
BACKOFF_JITTER = 0.2
BACKOFF_CAP = 30.0


class GatewayError(Exception):
    pass


class TransientError(GatewayError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class PermanentError(GatewayError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class TransportError(GatewayError):
    """Retries exhausted; ``status`` is the last HTTP status seen (None for timeouts)."""

    def __init__(self, message: str, status: int | None = None, attempts: int = 0):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class DecodeError(GatewayError):
    pass


@dataclass(frozen=True)
class PromptRequest:
    messages: tuple[tuple[str, str], ...]
    model: str = DEFAULT_MODEL
    temperature: float = 0.0
    max_retries: int = 3

    def __post_init__(self):
        msgs = tuple((str(r), str(c)) for r, c in self.messages)
        object.__setattr__(self, "messages", msgs)
        if not msgs:
            raise ValueError("a request needs at least one message")
        for role, _ in msgs:
            if role not in ("system", "user"):
                raise ValueError(f"unsupported role {role!r}")
        if not math.isfinite(self.temperature) or not 0 <= self.temperature <= 2:
            raise ValueError(f"temperature must be finite and in [0, 2], got {self.temperature}")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")

    @classmethod
    def user(cls, content: str, **kw) -> "PromptRequest":
        return cls(messages=(("user", content),), **kw)

    def wire_messages(self) -> list[dict]:
        return [{"role": r, "content": c} for r, c in self.messages]

    @property
    def last_user_content(self) -> str:
        for role, content in reversed(self.messages):
            if role == "user":
                return content
        return ""


@dataclass(frozen=True)
class ChatResponse:
    text: str
    from_cache: bool
    attempt_count: int


class Backend(Protocol):
    backend_id: str

    def send(self, req: PromptRequest, ordinal: int = 0) -> str: ...


def messages_hash_input(req: PromptRequest) -> str:
    return json.dumps(req.wire_messages(), ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def cache_key(backend_id: str, req: PromptRequest, ordinal: int = 0) -> str:
    """SHA-256 over (backend, model, temperature, messages, retry ordinal).

    The ordinal separates re-queries of an identical prompt, so a verification
    loop asking again does not get the first answer back from the cache.
    """
    payload = json.dumps(
        [backend_id, req.model, repr(float(req.temperature)), messages_hash_input(req), int(ordinal)],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ResponseCache:
    """Append-only JSONL journal keyed by digest.

    Every record is written with a single ``write`` of a full line followed by
    fsync; on load, a truncated trailing line (crash mid-write) is ignored.
    """

    def __init__(self, path: str | os.PathLike | None = None):
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self):
        with open(self.path, "rb") as fh:
            raw = fh.read()
        for lineno, line in enumerate(raw.split(b"\n"), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line.decode("utf-8"))
                self._entries[rec["digest"]] = rec["response_text"]
            except (ValueError, KeyError, TypeError):
                log.warning("%s:%d: ignoring unreadable cache record", self.path, lineno)

    def __contains__(self, digest: str) -> bool:
        return digest in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, digest: str) -> str | None:
        return self._entries.get(digest)

    def put(self, digest: str, req: PromptRequest, text: str) -> None:
        with self._lock:
            if digest in self._entries:
                return
            if self.path is not None:
                rec = {
                    "digest": digest,
                    "model": req.model,
                    "temperature": req.temperature,
                    "messages_hash_input": messages_hash_input(req),
                    "response_text": text,
                    "timestamp": time.time(),
                }
                line = (json.dumps(rec, ensure_ascii=False) + "\n").encode("utf-8")
                self.path.parent.mkdir(parents=True, exist_ok=True)
                fd = os.open(self.path, os.O_RDWR | os.O_APPEND | os.O_CREAT, 0o644)
                try:
                    # a crash before this write leaves a partial or missing trailing line, skipped by _load
                    _ensure_line_start(fd)
                    os.write(fd, line)
                    os.fsync(fd)
                finally:
                    os.close(fd)
            self._entries[digest] = text


def _ensure_line_start(fd: int) -> None:
    size = os.fstat(fd).st_size
    if size == 0:
        return
    if os.pread(fd, 1, size - 1) != b"\n":
        os.write(fd, b"\n")


def backoff_delay(attempt: int, rng: random.Random) -> float:
    """Delay before retry number ``attempt`` (1-based): 1 s doubling, +-20 % jitter, capped at 30 s."""
    base = min(BACKOFF_INITIAL * BACKOFF_FACTOR ** (attempt - 1), BACKOFF_CAP)
    return min(base * (1 + rng.uniform(-BACKOFF_JITTER, BACKOFF_JITTER)), BACKOFF_CAP)


class Gateway:
    """Uniform front door for a backend: cache lookup, bounded concurrency, retries."""

    def __init__(
        self,
        backend: Backend,
        cache: ResponseCache | None = None,
        max_in_flight: int = 4,
        sleep: Callable[[float], None] = time.sleep,
        jitter_seed: int = 0,
    ):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.backend = backend
        self.cache = cache if cache is not None else ResponseCache()
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._sleep = sleep
        self._rng = random.Random(jitter_seed)
        self._key_locks: dict[str, threading.Lock] = {}
        self._key_locks_guard = threading.Lock()
        self.network_calls = 0

    def _lock_for(self, digest: str) -> threading.Lock:
        with self._key_locks_guard:
            return self._key_locks.setdefault(digest, threading.Lock())

    def complete(self, req: PromptRequest, ordinal: int = 0) -> ChatResponse:
        digest = cache_key(self.backend.backend_id, req, ordinal)
        cached = self.cache.get(digest)
        if cached is not None:
            return ChatResponse(cached, True, 1)
        # one writer per key: concurrent callers with the same key wait for the first
        with self._lock_for(digest):
            cached = self.cache.get(digest)
            if cached is not None:
                return ChatResponse(cached, True, 1)
            text, attempts = self._send_with_retries(req, ordinal)
            self.cache.put(digest, req, text)
        return ChatResponse(text, False, attempts)

    def _send_with_retries(self, req: PromptRequest, ordinal: int) -> tuple[str, int]:
        attempt = 0
        while True:
            attempt += 1
            try:
                with self._slots:
                    self.network_calls += 1
                    text = self.backend.send(req, ordinal)
                return text, attempt
            except TransientError as exc:
                if attempt > req.max_retries:
                    raise TransportError(
                        f"giving up after {attempt} attempt(s): {exc}", status=exc.status, attempts=attempt
                    ) from exc
                delay = backoff_delay(attempt, self._rng)
                log.info("transient failure (%s), retry %d/%d in %.1fs", exc, attempt, req.max_retries, delay)
                self._sleep(delay)


class OpenAIBackend:
    """OpenAI-compatible ``POST /v1/chat/completions``; the key comes from ``ABSA_FORGE_API_KEY``."""

    def __init__(self, endpoint: str = DEFAULT_ENDPOINT, api_key: str | None = None,
                 timeout: float = 60.0, client=None):
        import httpx

        self.endpoint = endpoint.rstrip("/")
        self.backend_id = f"openai:{self.endpoint}"
        key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = client or httpx.Client(timeout=timeout, headers=headers)
        self._httpx = httpx

    @property
    def url(self) -> str:
        base = self.endpoint
        if base.endswith("/v1"):
            return base + "/chat/completions"
        return base + "/v1/chat/completions"

    def send(self, req: PromptRequest, ordinal: int = 0) -> str:
        body = {"model": req.model, "messages": req.wire_messages(), "temperature": req.temperature}
        try:
            resp = self._client.post(self.url, json=body)
        except self._httpx.TimeoutException as exc:
            raise TransientError(f"timeout: {exc}") from exc
        except self._httpx.TransportError as exc:
            raise TransientError(f"connection error: {exc}") from exc
        status = resp.status_code
        if status == 429 or status >= 500:
            raise TransientError(f"HTTP {status}", status=status)
        if status >= 400:
            raise PermanentError(f"HTTP {status}: {resp.text[:200]}", status=status)
        return parse_chat_response(resp.content)

    def close(self):
        self._client.close()


def parse_chat_response(raw: bytes | str) -> str:
    try:
        payload = json.loads(raw)
        text = payload["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise DecodeError(f"malformed chat-completions response: {exc!r}") from None
    if not isinstance(text, str):
        raise DecodeError("choices[0].message.content is not a string")
    return text
