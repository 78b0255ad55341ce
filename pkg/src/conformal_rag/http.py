"""JSON-over-HTTP client shared by the remote embedding and chat providers."""
from __future__ import annotations

import logging
import os
import random
import threading
import time
from typing import Any, Callable

import httpx

from .errors import ConfigError, ProviderError, RetryableProviderError

logger = logging.getLogger(__name__)

API_KEY_ENV = "CONFORMAL_RAG_API_KEY"
MAX_ATTEMPTS = 5
DEFAULT_MAX_IN_FLIGHT = 4

_RETRY_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


def api_key_from_env() -> str | None:
    return os.environ.get(API_KEY_ENV) or None


class JsonClient:
    """POSTs JSON with exponential backoff plus jitter on transient failures.

    At most ``max_in_flight`` requests run concurrently across all threads
    sharing the client.
    """

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        *,
        max_attempts: int = MAX_ATTEMPTS,
        backoff_base: float = 0.5,
        backoff_max: float = 30.0,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        seed: int = 0,
    ):
        if not endpoint:
            raise ConfigError("remote provider endpoint is not configured")
        if max_attempts < 1:
            raise ConfigError("max_attempts must be >= 1")
        if max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        self.endpoint = endpoint
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.backoff_max = backoff_max
        self.max_in_flight = max_in_flight
        self._sleep = sleep
        self._jitter = random.Random(seed)
        self._jitter_lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(headers=headers, timeout=timeout, transport=transport)

    def _delay(self, attempt: int) -> float:
        with self._jitter_lock:
            jitter = self._jitter.random()
        return min(self.backoff_max, self.backoff_base * 2 ** (attempt - 1)) * (0.5 + jitter)

    def post(self, payload: dict[str, Any]) -> Any:
        last = ""
        for attempt in range(1, self.max_attempts + 1):
            try:
                with self._slots:
                    resp = self._client.post(self.endpoint, json=payload)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code < 400:
                    try:
                        return resp.json()
                    except ValueError as exc:
                        raise ProviderError(f"non-JSON response from {self.endpoint}: {exc}", attempt) from exc
                if resp.status_code not in _RETRY_STATUS:
                    raise ProviderError(
                        f"{self.endpoint} returned HTTP {resp.status_code}: {resp.text[:200]}", attempt
                    )
                last = f"HTTP {resp.status_code}"
            if attempt < self.max_attempts:
                delay = self._delay(attempt)
                logger.warning("request to %s failed (%s); retry %d in %.2fs", self.endpoint, last, attempt, delay)
                self._sleep(delay)
        raise RetryableProviderError(
            f"{self.endpoint} failed after {self.max_attempts} attempts: {last}", self.max_attempts
        )

    def close(self) -> None:
        self._client.close()
