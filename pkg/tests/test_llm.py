from __future__ import annotations

import threading
import time

import httpx
import pytest

from dtkg.llm import (
    AuthError,
    BackendConfig,
    CompletionRequest,
    EndpointError,
    Gateway,
    GatewayError,
    LiveBackend,
    RateLimitError,
    RetryPolicy,
    make_gateway,
    retrying,
)

REQ = CompletionRequest("system", "user")


def _reply(text: str) -> httpx.Response:
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def _live(handler, sleeps=None, **cfg) -> LiveBackend:
    config = BackendConfig(kind="live", endpoint="https://llm.example/v1/chat", model_id="m", **cfg)
    return LiveBackend(config, transport=httpx.MockTransport(handler),
                       sleep=(sleeps.append if sleeps is not None else lambda s: None))


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("ATOM_API_KEY", "secret")


def test_request_validation():
    with pytest.raises(ValueError):
        CompletionRequest("s", "u", temperature=2.5)
    with pytest.raises(ValueError):
        CompletionRequest("s", "u", max_output_tokens=0)


def test_retry_policy_backoff_grows_with_jitter():
    p = RetryPolicy(max_attempts=5, base_backoff_ms=500)
    for attempt in range(4):
        base = 0.5 * 2**attempt
        assert base <= p.delay(attempt) <= 1.5 * base


def test_retries_429_then_succeeds(api_key):
    calls, sleeps = [], []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(request)
        return httpx.Response(429) if len(calls) == 1 else _reply("ok")

    assert _live(handler, sleeps).complete(REQ) == "ok"
    assert len(calls) == 2 and len(sleeps) == 1 and 0.5 <= sleeps[0] <= 0.75
    body = calls[0].read()
    assert b'"model":"m"' in body.replace(b" ", b"")
    assert calls[0].headers["authorization"] == "Bearer secret"


def test_gives_up_after_max_attempts(api_key):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(503)

    with pytest.raises(RateLimitError):
        _live(handler).complete(REQ)
    assert len(calls) == 5


def test_timeouts_are_retried(api_key):
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            raise httpx.ReadTimeout("slow", request=request)
        return _reply("late")

    assert _live(handler).complete(REQ) == "late"


@pytest.mark.parametrize("status", [401, 403])
def test_auth_failures_are_not_retried(api_key, status):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(status, text="denied")

    with pytest.raises(AuthError):
        _live(handler).complete(REQ)
    assert calls == [1]


def test_missing_key_fails_before_any_request(monkeypatch):
    monkeypatch.delenv("ATOM_API_KEY", raising=False)
    calls = []
    backend = _live(lambda r: calls.append(1) or _reply("x"))
    with pytest.raises(AuthError, match="ATOM_API_KEY"):
        backend.complete(REQ)
    assert calls == []


def test_client_errors_surface(api_key):
    with pytest.raises(httpx.HTTPStatusError):
        _live(lambda r: httpx.Response(400)).complete(REQ)


def test_unexpected_reply_shape(api_key):
    with pytest.raises(GatewayError, match="reply shape"):
        _live(lambda r: httpx.Response(200, json={"nope": 1})).complete(REQ)


def test_malformed_endpoint():
    with pytest.raises(EndpointError):
        LiveBackend(BackendConfig(kind="live", endpoint="not a url"))


def test_retrying_without_http():
    req = httpx.Request("POST", "https://x.example")
    seq = iter([httpx.Response(500, request=req), httpx.Response(200, text="fine", request=req)])
    slept = []
    assert retrying(lambda: next(seq), RetryPolicy(), slept.append).text == "fine"
    assert len(slept) == 1


class _SlowBackend:
    kind = "test"

    def __init__(self):
        self.active = 0
        self.peak = 0
        self.lock = threading.Lock()

    def complete(self, req):
        with self.lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        time.sleep(0.005)
        with self.lock:
            self.active -= 1
        if req.user_prompt == "boom":
            raise RuntimeError("slot failed")
        return req.user_prompt.upper()


def test_concurrency_bound_is_respected():
    backend = _SlowBackend()
    gw = Gateway(backend, max_concurrent_requests=40)
    out = gw.complete_batch([CompletionRequest("s", f"r{i}") for i in range(100)])
    assert out == [f"R{i}" for i in range(100)]
    assert 1 <= backend.peak <= 40


def test_bound_is_shared_across_callers():
    backend = _SlowBackend()
    gw = Gateway(backend, max_concurrent_requests=3)
    threads = [threading.Thread(target=gw.complete_batch,
                                args=([CompletionRequest("s", "x")] * 10,)) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert backend.peak <= 3


def test_per_slot_failure_does_not_cancel_siblings():
    gw = Gateway(_SlowBackend(), 4)
    out = gw.complete_batch([CompletionRequest("s", "a"), CompletionRequest("s", "boom"),
                             CompletionRequest("s", "c")])
    assert out[0] == "A" and out[2] == "C"
    assert isinstance(out[1], RuntimeError)


def test_empty_batch():
    assert Gateway(_SlowBackend()).complete_batch([]) == []


def test_make_gateway_mock_and_env(monkeypatch):
    assert make_gateway(BackendConfig()).kind == "mock"
    monkeypatch.setenv("ATOM_API_ENDPOINT", "https://e.example/v1")
    monkeypatch.setenv("ATOM_MODEL_ID", "model-x")
    cfg = BackendConfig.from_env()
    assert (cfg.kind, cfg.endpoint, cfg.model_id) == ("live", "https://e.example/v1", "model-x")
    assert make_gateway(cfg).kind == "live"


def test_backend_config_validation():
    with pytest.raises(ValueError):
        BackendConfig(kind="other")
    with pytest.raises(ValueError):
        BackendConfig(max_concurrent_requests=0)
