"""Completion-model access: a live chat-completion HTTP backend, a deterministic
mock backend, and a gateway that bounds concurrency across both."""

from __future__ import annotations

import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence
from urllib.parse import urlparse

import httpx

logger = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "ATOM_API_KEY"
ENDPOINT_ENV = "ATOM_API_ENDPOINT"
MODEL_ENV = "ATOM_MODEL_ID"

RETRY_STATUS = frozenset({429, 500, 502, 503, 504})


class GatewayError(RuntimeError):
    """Base class for completion failures."""


class AuthError(GatewayError):
    pass


class RateLimitError(GatewayError):
    """Retries exhausted on a transient failure."""


class EndpointError(GatewayError):
    pass


@dataclass(frozen=True)
class CompletionRequest:
    system_prompt: str
    user_prompt: str
    temperature: float = 0.0
    max_output_tokens: int = 2048

    def __post_init__(self) -> None:
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_backoff_ms: int = 500

    def delay(self, attempt: int) -> float:
        """Seconds to wait after failed attempt number ``attempt`` (0-based)."""
        base = self.base_backoff_ms / 1000.0 * (2**attempt)
        return base + random.uniform(0, base / 2)


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    endpoint: str = ""
    model_id: str = ""
    api_key_env_var: str = DEFAULT_API_KEY_ENV
    max_concurrent_requests: int = 40
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    timeout_s: float = 120.0

    def __post_init__(self) -> None:
        if self.kind not in ("live", "mock"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.max_concurrent_requests < 1:
            raise ValueError("max_concurrent_requests must be >= 1")

    @classmethod
    def from_env(cls, kind: str = "live", **overrides) -> BackendConfig:
        values = {
            "kind": kind,
            "endpoint": os.environ.get(ENDPOINT_ENV, ""),
            "model_id": os.environ.get(MODEL_ENV, ""),
        }
        values.update(overrides)
        return cls(**values)


class Backend(Protocol):
    kind: str

    def complete(self, req: CompletionRequest) -> str: ...


def check_endpoint(url: str) -> str:
    parsed = urlparse(url)
    if parsed.scheme not in ("http", "https") or not parsed.netloc:
        raise EndpointError(f"malformed endpoint: {url!r}")
    return url


def retrying(
    send: Callable[[], httpx.Response],
    policy: RetryPolicy,
    sleep: Callable[[float], None] = time.sleep,
) -> httpx.Response:
    """Call ``send`` until it returns a non-transient response.

    Retries timeouts, transport errors, 429 and 5xx; raises AuthError on
    401/403 without retrying.
    """
    last: str = ""
    for attempt in range(policy.max_attempts):
        try:
            resp = send()
        except (httpx.TimeoutException, httpx.TransportError) as exc:
            last = f"{type(exc).__name__}: {exc}"
        else:
            if resp.status_code in (401, 403):
                raise AuthError(f"HTTP {resp.status_code}: {resp.text[:200]}")
            if resp.status_code not in RETRY_STATUS:
                resp.raise_for_status()
                return resp
            last = f"HTTP {resp.status_code}"
        if attempt + 1 < policy.max_attempts:
            delay = policy.delay(attempt)
            logger.debug("transient failure (%s); retrying in %.2fs", last, delay)
            sleep(delay)
    raise RateLimitError(f"gave up after {policy.max_attempts} attempts: {last}")


class LiveBackend:
    """Chat-completion JSON over HTTP (``messages`` in, ``choices`` out)."""

    kind = "live"

    def __init__(
        self,
        config: BackendConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config
        self.endpoint = check_endpoint(config.endpoint)
        self._sleep = sleep
        self._client = httpx.Client(timeout=config.timeout_s, transport=transport)

    def _api_key(self) -> str:
        key = os.environ.get(self.config.api_key_env_var)
        if not key:
            raise AuthError(f"environment variable {self.config.api_key_env_var} is not set")
        return key

    def complete(self, req: CompletionRequest) -> str:
        headers = {"Authorization": f"Bearer {self._api_key()}"}
        body = {
            "model": self.config.model_id,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_prompt},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        resp = retrying(
            lambda: self._client.post(self.endpoint, json=body, headers=headers),
            self.config.retry,
            self._sleep,
        )
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"unexpected reply shape: {resp.text[:200]}") from exc

    def close(self) -> None:
        self._client.close()


class Gateway:
    """Shared entry point for completions; the concurrency bound is global to
    the instance, so concurrent callers share it."""

    def __init__(self, backend: Backend, max_concurrent_requests: int = 40) -> None:
        if max_concurrent_requests < 1:
            raise ValueError("max_concurrent_requests must be >= 1")
        self.backend = backend
        self.max_concurrent_requests = max_concurrent_requests
        self._slots = threading.BoundedSemaphore(max_concurrent_requests)

    @property
    def kind(self) -> str:
        return self.backend.kind

    def complete(self, req: CompletionRequest) -> str:
        with self._slots:
            return self.backend.complete(req)

    def complete_batch(self, reqs: Sequence[CompletionRequest]) -> list[str | Exception]:
        """Answer every request; slot ``i`` holds the reply or the exception
        raised for ``reqs[i]``."""
        if not reqs:
            return []

        def one(req: CompletionRequest) -> str | Exception:
            try:
                return self.complete(req)
            except Exception as exc:  # per-slot failure, siblings continue
                return exc

        workers = min(self.max_concurrent_requests, len(reqs))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, reqs))


def make_gateway(config: BackendConfig, **kwargs) -> Gateway:
    if config.kind == "mock":
        from .mock import MockBackend

        backend: Backend = MockBackend()
    else:
        backend = LiveBackend(config, **kwargs)
    return Gateway(backend, config.max_concurrent_requests)
