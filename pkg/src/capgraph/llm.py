"""Chat-completion client with a file-backed response cache.

Each (model, prompt) pair maps to one cache file, so recorded responses can
be committed and replayed to run the whole pipeline offline. Replayed calls
also replay their recorded token counts, keeping usage statistics stable
across runs.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import requests

from .errors import LlmTransport

API_KEY_ENV = "CAPGRAPH_API_KEY"

DEFAULT_INPUT_PRICE_PER_MILLION = 0.5
DEFAULT_OUTPUT_PRICE_PER_MILLION = 1.5


@dataclass
class TokenUsage:
    input_tokens: int = 0
    output_tokens: int = 0
    estimated_cost: float = 0.0

    def __post_init__(self):
        if self.input_tokens < 0 or self.output_tokens < 0 or self.estimated_cost < 0:
            raise ValueError("token usage fields must be non-negative")

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.input_tokens + other.input_tokens,
            self.output_tokens + other.output_tokens,
            self.estimated_cost + other.estimated_cost,
        )

    def to_dict(self) -> dict:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "estimated_cost": self.estimated_cost,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenUsage":
        return cls(
            input_tokens=int(d.get("input_tokens", 0)),
            output_tokens=int(d.get("output_tokens", 0)),
            estimated_cost=float(d.get("estimated_cost", 0.0)),
        )


def estimate_cost(
    input_tokens: int,
    output_tokens: int,
    input_price_per_million: float = DEFAULT_INPUT_PRICE_PER_MILLION,
    output_price_per_million: float = DEFAULT_OUTPUT_PRICE_PER_MILLION,
) -> float:
    """Dollar cost of one call: (in/1M)*in_price + (out/1M)*out_price."""
    return (input_tokens / 1_000_000) * input_price_per_million + (
        output_tokens / 1_000_000
    ) * output_price_per_million


def cache_key(model_name: str, prompt: str) -> str:
    digest = hashlib.sha256()
    digest.update(model_name.encode("utf-8"))
    digest.update(b"\x00")
    digest.update(prompt.encode("utf-8"))
    return digest.hexdigest()


class RateLimiter:
    """Global ceiling on network request rate, shared across clients/threads.

    Cache hits never consult the limiter, so offline replays run unthrottled.
    """

    def __init__(self, max_per_second: Optional[float] = None, clock=time.monotonic,
                 sleep=time.sleep):
        self.max_per_second = max_per_second
        self._clock = clock
        self._sleep = sleep
        self._next_allowed = 0.0
        self._lock = threading.Lock()

    def wait(self) -> float:
        """Block until a request may go out; returns the delay applied."""
        if not self.max_per_second:
            return 0.0
        interval = 1.0 / self.max_per_second
        with self._lock:
            now = self._clock()
            delay = max(0.0, self._next_allowed - now)
            self._next_allowed = max(now, self._next_allowed) + interval
        if delay:
            self._sleep(delay)
        return delay


GLOBAL_RATE_LIMITER = RateLimiter()


class ChatClient:
    """Cached chat-completion transport.

    ``complete`` first consults the cache; on a miss it POSTs to the endpoint
    (unless ``offline``), retries transient failures, then records the reply.
    Token usage from every call, cached or live, accumulates on ``usage``.
    """

    def __init__(
        self,
        model_name: str,
        endpoint: str = "",
        temperature: float = 0.0,
        max_retries: int = 2,
        cache_dir=None,
        offline: bool = False,
        input_price_per_million: float = DEFAULT_INPUT_PRICE_PER_MILLION,
        output_price_per_million: float = DEFAULT_OUTPUT_PRICE_PER_MILLION,
        timeout: float = 60.0,
        rate_limiter: Optional[RateLimiter] = None,
    ):
        self.model_name = model_name
        self.endpoint = endpoint
        self.temperature = temperature
        self.max_retries = max_retries
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.offline = offline
        self.input_price_per_million = input_price_per_million
        self.output_price_per_million = output_price_per_million
        self.timeout = timeout
        self.rate_limiter = rate_limiter if rate_limiter is not None else GLOBAL_RATE_LIMITER
        self.usage = TokenUsage()
        self.network_calls = 0
        self._lock = threading.Lock()

    # -- cache ------------------------------------------------------------

    def _cache_path(self, key: str) -> Optional[Path]:
        if self.cache_dir is None:
            return None
        return self.cache_dir / f"{key}.json"

    def _cache_read(self, key: str) -> Optional[dict]:
        path = self._cache_path(key)
        if path is None or not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def _cache_write(self, key: str, record: dict) -> None:
        path = self._cache_path(key)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(record, sort_keys=True, indent=1), encoding="utf-8")
        tmp.replace(path)

    # -- transport ---------------------------------------------------------

    def _post(self, prompt: str) -> dict:
        api_key = os.environ.get(API_KEY_ENV, "")
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        body = {
            "model": self.model_name,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        last_error: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            try:
                self.rate_limiter.wait()
                self.network_calls += 1
                response = requests.post(
                    self.endpoint, json=body, headers=headers, timeout=self.timeout
                )
                if response.status_code in (429, 500, 502, 503, 504):
                    last_error = LlmTransport(f"HTTP {response.status_code}")
                elif response.status_code != 200:
                    raise LlmTransport(f"HTTP {response.status_code}: {response.text[:200]}")
                else:
                    return response.json()
            except requests.RequestException as e:
                last_error = e
            if attempt < self.max_retries:
                time.sleep(min(2.0**attempt, 8.0))
        raise LlmTransport(f"request failed after {self.max_retries + 1} attempts: {last_error}")

    def complete(self, prompt: str) -> str:
        key = cache_key(self.model_name, prompt)
        with self._lock:
            cached = self._cache_read(key)
            if cached is not None:
                self._account(cached.get("input_tokens", 0), cached.get("output_tokens", 0))
                return cached["response"]
            if self.offline:
                raise LlmTransport(
                    f"offline mode and no cached response for key {key[:12]}…"
                )
            payload = self._post(prompt)
            try:
                text = payload["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError) as e:
                raise LlmTransport(f"malformed completion payload: {e}") from e
            usage = payload.get("usage", {})
            input_tokens = int(usage.get("prompt_tokens", 0))
            output_tokens = int(usage.get("completion_tokens", 0))
            self._cache_write(
                key,
                {
                    "model": self.model_name,
                    "response": text,
                    "input_tokens": input_tokens,
                    "output_tokens": output_tokens,
                },
            )
            self._account(input_tokens, output_tokens)
            return text

    def _account(self, input_tokens: int, output_tokens: int) -> None:
        self.usage = self.usage + TokenUsage(
            input_tokens,
            output_tokens,
            estimate_cost(
                input_tokens,
                output_tokens,
                self.input_price_per_million,
                self.output_price_per_million,
            ),
        )


def write_cassette(cache_dir, model_name: str, prompt: str, response: str,
                   input_tokens: int = 0, output_tokens: int = 0) -> Path:
    """Record a canned response so later calls replay it without network."""
    key = cache_key(model_name, prompt)
    path = Path(cache_dir) / f"{key}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(
            {
                "model": model_name,
                "response": response,
                "input_tokens": input_tokens,
                "output_tokens": output_tokens,
            },
            sort_keys=True,
            indent=1,
        ),
        encoding="utf-8",
    )
    return path
