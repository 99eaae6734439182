"""Provider-agnostic chat-completion client with a content-addressed cache.

Every response is written to disk keyed by a hash of the request before it
is returned, so any LLM-dependent stage can be replayed byte-identically
from a warm cache, with no credentials and no network. Provider dialect
differences are confined to named adapters; retries, rate limiting and
concurrency bounds are per endpoint.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

from .storage import atomic_write_text

logger = logging.getLogger(__name__)

RETRY_BASE_DELAY_S = 1.0
RETRY_MAX_DELAY_S = 30.0


class GatewayError(RuntimeError):
    pass


class AuthError(GatewayError):
    pass


class RateLimitedError(GatewayError):
    pass


class ProviderError(GatewayError):
    def __init__(self, status: int, detail: str = ""):
        self.status = status
        super().__init__(f"provider returned {status}: {detail}" if detail else f"provider returned {status}")


class GatewayTimeoutError(GatewayError):
    pass


@dataclass(frozen=True)
class ChatRequest:
    endpoint_id: str
    model_id: str
    messages: tuple[tuple[str, str], ...]  # (role, text), role in {system,user,assistant}
    temperature: float = 0.0
    max_output_tokens: int = 1024
    response_hint: str = "free_text"  # or "structured"

    def __post_init__(self):
        if not self.messages:
            raise ValueError("request needs at least one message")
        if not (self.temperature >= 0 and self.temperature == self.temperature):
            raise ValueError("temperature must be finite and >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")
        for role, _ in self.messages:
            if role not in ("system", "user", "assistant"):
                raise ValueError(f"bad message role: {role!r}")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cached: bool = False
    latency_ms: float = 0.0


def canonical_request(req: ChatRequest) -> dict[str, Any]:
    # response_hint is presentation, not identity: it never reaches the wire.
    return {
        "endpoint_id": req.endpoint_id,
        "model_id": req.model_id,
        "messages": [[role, text] for role, text in req.messages],
        "temperature": req.temperature,
        "max_output_tokens": req.max_output_tokens,
    }


def cache_key(req: ChatRequest) -> str:
    payload = json.dumps(
        canonical_request(req), sort_keys=True, ensure_ascii=True, separators=(",", ":")
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ResponseCache:
    """One JSON file per response under cache/<first 2 hex>/<key>.json."""

    def __init__(self, root: Path | str):
        self.root = Path(root)

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict[str, Any] | None:
        path = self._path(key)
        if not path.exists():
            return None
        return json.loads(path.read_text("utf-8"))

    def put(self, key: str, request: dict[str, Any], response: dict[str, Any]) -> None:
        entry = {"key": key, "request": request, "response": response}
        atomic_write_text(self._path(key), json.dumps(entry, sort_keys=True, ensure_ascii=False))


class _TokenBucket:
    """Requests-per-minute ceiling shared by all threads of one endpoint."""

    def __init__(self, rpm: int, clock: Callable[[], float], sleep: Callable[[float], None]):
        rpm = max(1, rpm)
        self.capacity = float(rpm)
        self.tokens = float(rpm)
        self.rate = rpm / 60.0
        self.updated = clock()
        self.clock = clock
        self.sleep = sleep
        self.lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self.lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleep(wait)


@dataclass
class EndpointConfig:
    endpoint_id: str
    base_url: str
    adapter: str = "openai_chat"
    rpm_limit: int = 600
    max_parallel: int = 4
    retry_cap: int = 5
    timeout_s: float = 120.0
    api_key_env: str | None = None

    def key_env_var(self) -> str:
        if self.api_key_env:
            return self.api_key_env
        return re.sub(r"[^A-Z0-9]", "_", self.endpoint_id.upper()) + "_API_KEY"


class Transport(Protocol):
    def __call__(
        self, url: str, headers: Mapping[str, str], payload: Mapping[str, Any], timeout_s: float
    ) -> tuple[int, Any]: ...


def http_transport(
    url: str, headers: Mapping[str, str], payload: Mapping[str, Any], timeout_s: float
) -> tuple[int, Any]:
    import requests

    try:
        resp = requests.post(url, headers=dict(headers), json=dict(payload), timeout=timeout_s)
    except requests.Timeout as exc:
        raise TimeoutError(str(exc)) from exc
    except requests.ConnectionError as exc:
        raise TimeoutError(str(exc)) from exc
    try:
        body = resp.json()
    except ValueError:
        body = {"raw": resp.text}
    return resp.status_code, body


class _OpenAIChatAdapter:
    def build(
        self, base_url: str, api_key: str, req: ChatRequest
    ) -> tuple[str, dict[str, str], dict[str, Any]]:
        url = base_url.rstrip("/") + "/chat/completions"
        headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
        payload = {
            "model": req.model_id,
            "messages": [{"role": role, "content": text} for role, text in req.messages],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        return url, headers, payload

    def parse(self, body: Mapping[str, Any]) -> tuple[str, int, int]:
        text = body["choices"][0]["message"]["content"]
        usage = body.get("usage", {})
        return text, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))


ADAPTERS: dict[str, Any] = {"openai_chat": _OpenAIChatAdapter()}


@dataclass
class _EndpointState:
    semaphore: threading.Semaphore
    bucket: _TokenBucket


class LLMGateway:
    """Thread-safe completion client; all LLM-dependent stages go through here."""

    def __init__(
        self,
        endpoints: Mapping[str, EndpointConfig],
        cache_dir: Path | str,
        transport: Transport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
        rng: random.Random | None = None,
    ):
        self.endpoints = dict(endpoints)
        self.cache = ResponseCache(cache_dir)
        self.transport = transport or http_transport
        self.sleep = sleep
        self.clock = clock
        self.rng = rng or random.Random()
        self._states: dict[str, _EndpointState] = {}
        self._states_lock = threading.Lock()

    def _endpoint(self, endpoint_id: str) -> EndpointConfig:
        try:
            return self.endpoints[endpoint_id]
        except KeyError:
            raise GatewayError(f"endpoint {endpoint_id!r} is not configured") from None

    def _state(self, cfg: EndpointConfig) -> _EndpointState:
        with self._states_lock:
            state = self._states.get(cfg.endpoint_id)
            if state is None:
                state = _EndpointState(
                    semaphore=threading.Semaphore(cfg.max_parallel),
                    bucket=_TokenBucket(cfg.rpm_limit, self.clock, self.sleep),
                )
                self._states[cfg.endpoint_id] = state
            return state

    def put_cached(
        self, req: ChatRequest, text: str, prompt_tokens: int = 0, completion_tokens: int = 0
    ) -> str:
        """Record a response for a request without any network call.

        Used to import recorded responses so later runs replay from cache.
        """
        key = cache_key(req)
        self.cache.put(
            key,
            canonical_request(req),
            {
                "text": text,
                "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
                "latency_ms": 0.0,
            },
        )
        return key

    def complete(self, req: ChatRequest) -> ChatResponse:
        key = cache_key(req)
        entry = self.cache.get(key)
        if entry is not None:
            stored = entry["response"]
            return ChatResponse(
                text=stored["text"],
                prompt_tokens=stored["usage"]["prompt_tokens"],
                completion_tokens=stored["usage"]["completion_tokens"],
                cached=True,
                latency_ms=stored.get("latency_ms", 0.0),
            )

        cfg = self._endpoint(req.endpoint_id)
        env_var = cfg.key_env_var()
        api_key = os.environ.get(env_var)
        if not api_key:
            raise AuthError(f"missing credential: set {env_var}")
        adapter = ADAPTERS.get(cfg.adapter)
        if adapter is None:
            raise GatewayError(f"unknown adapter {cfg.adapter!r} for endpoint {cfg.endpoint_id}")
        url, headers, payload = adapter.build(cfg.base_url, api_key, req)

        state = self._state(cfg)
        last_error: GatewayError | None = None
        attempts = max(1, cfg.retry_cap)
        with state.semaphore:
            for attempt in range(1, attempts + 1):
                state.bucket.acquire()
                started = self.clock()
                try:
                    status, body = self.transport(url, headers, payload, cfg.timeout_s)
                except TimeoutError as exc:
                    last_error = GatewayTimeoutError(str(exc))
                    self._backoff(attempt)
                    continue
                if status == 200:
                    try:
                        text, prompt_tokens, completion_tokens = adapter.parse(body)
                    except (KeyError, IndexError, TypeError) as exc:
                        raise ProviderError(status, f"unparseable response body: {exc}") from exc
                    latency_ms = (self.clock() - started) * 1000.0
                    self.cache.put(
                        key,
                        canonical_request(req),
                        {
                            "text": text,
                            "usage": {
                                "prompt_tokens": prompt_tokens,
                                "completion_tokens": completion_tokens,
                            },
                            "latency_ms": latency_ms,
                        },
                    )
                    if attempt > 1:
                        logger.info(
                            "%s/%s succeeded after %d attempts", cfg.endpoint_id, req.model_id, attempt
                        )
                    return ChatResponse(
                        text=text,
                        prompt_tokens=prompt_tokens,
                        completion_tokens=completion_tokens,
                        cached=False,
                        latency_ms=latency_ms,
                    )
                if status in (401, 403):
                    raise AuthError(f"endpoint {cfg.endpoint_id} rejected credentials ({status})")
                if status == 429:
                    last_error = RateLimitedError(f"rate limited by {cfg.endpoint_id}")
                    logger.warning("429 from %s, attempt %d/%d", cfg.endpoint_id, attempt, cfg.retry_cap)
                    self._backoff(attempt)
                    continue
                if 500 <= status < 600:
                    last_error = ProviderError(status)
                    self._backoff(attempt)
                    continue
                raise ProviderError(status, json.dumps(body)[:200])
        assert last_error is not None
        raise last_error

    def _backoff(self, attempt: int) -> None:
        delay = min(RETRY_MAX_DELAY_S, RETRY_BASE_DELAY_S * (2 ** (attempt - 1)))
        self.sleep(delay + self.rng.uniform(0, 0.25))

    def complete_batch(
        self, reqs: Sequence[ChatRequest], parallelism: int
    ) -> list[ChatResponse | GatewayError]:
        """Run requests with at most ``parallelism`` in flight.

        Results are positionally aligned with the requests; a failed request
        yields its error object at that index instead of aborting the batch.
        """
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if not reqs:
            return []
        results: list[ChatResponse | GatewayError] = [None] * len(reqs)  # type: ignore[list-item]

        def run(index: int, req: ChatRequest) -> None:
            try:
                results[index] = self.complete(req)
            except GatewayError as exc:
                results[index] = exc

        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            futures = [pool.submit(run, i, req) for i, req in enumerate(reqs)]
            for future in futures:
                future.result()
        return results
