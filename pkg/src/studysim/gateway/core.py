"""Gateway: caching, retry, rate limiting, and JSON extraction helpers."""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable, TypeVar

from ..errors import FatalError, InvalidInputError, ParseError, RetryableError
from .cache import ResponseCache
from .types import CompletionResult, LMRequest

logger = logging.getLogger(__name__)

T = TypeVar("T")

# Stride between retry seeds; large and odd so bumped seeds never collide
# with the base_seed + trial_index streams used elsewhere.
RETRY_SEED_STRIDE = 1_000_003

# What request_json re-raises when the model's output cannot be used; backend
# failures (RetryableError, FatalError) pass through untouched so callers can
# distinguish bad data from a broken backend.
JSON_VALIDATION_ERRORS = (ParseError, ValueError, KeyError, TypeError)


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    backoff_base: float = 0.5
    backoff_cap: float = 8.0

    def delay(self, attempt: int) -> float:
        return min(self.backoff_base * (2**attempt), self.backoff_cap)


class TokenBucket:
    """Request throttle; refills continuously at `per_minute / 60` per second."""

    def __init__(self, per_minute: float):
        if per_minute <= 0:
            raise InvalidInputError("rate limit must be positive")
        self.capacity = float(per_minute)
        self.rate = per_minute / 60.0
        self.tokens = float(per_minute)
        self.updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            time.sleep(wait)


class Gateway:
    """Unified completion/embedding entry point over any backend.

    Every successful response is written to the cache before it is returned,
    so an interrupted run can resume without repeating backend calls.
    """

    def __init__(
        self,
        backend,
        cache: ResponseCache | None = None,
        rate_limiter: TokenBucket | None = None,
        retry: RetryPolicy | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.cache = cache or ResponseCache()
        self.rate_limiter = rate_limiter
        self.retry = retry or RetryPolicy()
        self._sleep = sleep
        self._lock = threading.Lock()
        self.backend_calls = 0
        self.cache_hits = 0

    def identity(self) -> str:
        return self.backend.identity()

    def _call_with_retry(self, fn: Callable[[], T], label: str) -> T:
        last: Exception | None = None
        for attempt in range(self.retry.max_attempts):
            if self.rate_limiter is not None:
                self.rate_limiter.acquire()
            try:
                result = fn()
            except RetryableError as exc:
                last = exc
                if attempt + 1 < self.retry.max_attempts:
                    delay = self.retry.delay(attempt)
                    logger.warning("%s failed (attempt %d): %s; retrying in %.2fs",
                                   label, attempt + 1, exc, delay)
                    self._sleep(delay)
                continue
            with self._lock:
                self.backend_calls += 1
            return result
        raise RetryableError(f"{label} failed after {self.retry.max_attempts} attempts: {last}")

    def complete(self, request: LMRequest) -> CompletionResult:
        key = request.cache_key()
        cached = self.cache.get(key)
        if cached is not None:
            with self._lock:
                self.cache_hits += 1
            return CompletionResult.from_dict(cached)
        result = self._call_with_retry(lambda: self.backend.complete(request), "complete")
        self.cache.put(key, request.to_dict(), result.to_dict())
        return result

    def embed(self, text: str, model_id: str = "") -> tuple[float, ...]:
        if not text:
            raise InvalidInputError("cannot embed empty text")
        key_payload = {"kind": "embedding", "model_id": model_id, "text": text}
        from ..util import canonical_json, sha256_hex

        key = sha256_hex(canonical_json(key_payload))
        cached = self.cache.get(key)
        if cached is not None:
            with self._lock:
                self.cache_hits += 1
            return tuple(cached["embedding"])
        vector = self._call_with_retry(lambda: self.backend.embed(text, model_id), "embed")
        self.cache.put(key, key_payload, {"embedding": list(vector)})
        return tuple(vector)


# -- JSON extraction ----------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def _balanced_object(text: str, start: int) -> str | None:
    """Return the balanced {...} slice starting at `start`, or None."""
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start : i + 1]
    return None


def extract_json(raw: str) -> Any:
    """Parse the first balanced top-level JSON object out of LM output.

    Code fences are searched first since models often wrap their JSON.
    Raises :class:`ParseError` carrying the raw text when nothing parses.
    """
    candidates = [m.group(1) for m in _FENCE_RE.finditer(raw)]
    candidates.append(raw)
    for candidate in candidates:
        pos = candidate.find("{")
        while pos >= 0:
            chunk = _balanced_object(candidate, pos)
            if chunk is not None:
                try:
                    return json.loads(chunk)
                except json.JSONDecodeError:
                    pass
            pos = candidate.find("{", pos + 1)
    raise ParseError("no balanced JSON object found", raw=raw)


def request_json(
    gateway: Gateway,
    request: LMRequest,
    validate: Callable[[Any], T],
    retries: int = 3,
) -> T:
    """Issue a request and parse/validate its JSON, re-asking on bad output.

    Each retry bumps the request seed so the backend (and the cache) sees a
    fresh request instead of replaying the rejected reply. `retries` counts
    total attempts. The final failure propagates as ParseError/ValueError
    for the caller to wrap in its stage-specific error.
    """
    last: Exception | None = None
    for attempt in range(retries):
        attempt_request = (
            request if attempt == 0 else request.with_seed(request.seed + RETRY_SEED_STRIDE * attempt)
        )
        result = gateway.complete(attempt_request)
        try:
            return validate(extract_json(result.text))
        except (ParseError, ValueError, KeyError, TypeError) as exc:
            last = exc
            logger.debug("JSON validation failed (attempt %d): %s", attempt + 1, exc)
    assert last is not None
    raise last
