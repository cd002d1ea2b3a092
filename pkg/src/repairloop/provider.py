"""LLM provider abstraction: HTTP chat completions plus scripted stand-ins.

The repair agent only ever calls ``provider.complete(bundle)``; whether
the response comes from an OpenAI-compatible endpoint or a canned script
is invisible to it, which is what makes whole sessions testable offline.

The HTTP provider retries transport errors, 5xx responses and rate
limits with exponential backoff (delay = base * factor^(k-1)) and gives
up with :class:`ProviderUnavailableError` once the attempt budget is
spent.  A shared semaphore caps concurrent in-flight requests so a
parallel benchmark cannot trigger a rate-limit storm.
"""

from __future__ import annotations

import os
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import httpx

from .prompt import PromptBundle

ENV_ENDPOINT = "REPAIRLOOP_ENDPOINT"
ENV_API_KEY = "REPAIRLOOP_API_KEY"
ENV_MODEL = "REPAIRLOOP_MODEL"

DEFAULT_TEMPERATURE = 0.2  # unreported upstream; pinned here for reproducibility
DEFAULT_MAX_CONCURRENT = 4
RETRYABLE_STATUSES = frozenset({429, 500, 502, 503, 504})


class ProviderUnavailableError(RuntimeError):
    """All retry attempts failed or the provider is misconfigured."""


class TransientProviderError(RuntimeError):
    """A retryable failure: transport error, 5xx, or rate limit."""


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 1.0
    factor: float = 2.0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.factor < 1:
            raise ValueError("factor must be >= 1")

    def delay(self, attempt: int) -> float:
        """Backoff before retry number ``attempt`` (1-based); non-decreasing."""
        return self.base_delay * self.factor ** (attempt - 1)


@dataclass(frozen=True)
class ProviderConfig:
    endpoint: str
    model_id: str
    api_key: str = ""
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    request_timeout: float = 120.0
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self) -> None:
        if self.request_timeout <= 0:
            raise ValueError("request_timeout must be positive")

    @classmethod
    def from_env(cls, model_id: str | None = None) -> ProviderConfig:
        """Read endpoint/key/model from the environment; key stays out of logs."""
        endpoint = os.environ.get(ENV_ENDPOINT, "")
        api_key = os.environ.get(ENV_API_KEY, "")
        model = model_id or os.environ.get(ENV_MODEL, "")
        if not endpoint or not model:
            raise ProviderUnavailableError(
                f"provider misconfigured: set {ENV_ENDPOINT} and {ENV_MODEL}"
                f" (and usually {ENV_API_KEY})"
            )
        return cls(endpoint=endpoint, model_id=model, api_key=api_key)


@dataclass(frozen=True)
class ChatExchange:
    """One completed provider round-trip."""

    request: PromptBundle
    response: str
    latency: float
    attempts_used: int


class HttpProvider:
    """OpenAI-compatible chat-completions client with retry/backoff.

    ``send`` and ``sleep`` are injectable so tests can script transport
    failures and observe backoff delays without real time passing.
    """

    def __init__(
        self,
        config: ProviderConfig,
        send: Callable[[dict], str] | None = None,
        sleep: Callable[[float], None] = time.sleep,
        max_concurrent: int = DEFAULT_MAX_CONCURRENT,
    ) -> None:
        self.config = config
        self._send = send or self._http_send
        self._sleep = sleep
        self._gate = threading.Semaphore(max_concurrent)

    @property
    def model_id(self) -> str:
        return self.config.model_id

    def _http_send(self, payload: dict) -> str:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        try:
            resp = httpx.post(
                self.config.endpoint,
                json=payload,
                headers=headers,
                timeout=self.config.request_timeout,
            )
        except httpx.HTTPError as exc:
            raise TransientProviderError(f"transport failure: {exc}") from exc
        if resp.status_code in RETRYABLE_STATUSES:
            raise TransientProviderError(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise ProviderUnavailableError(
                f"HTTP {resp.status_code} from provider: {resp.text[:200]}"
            )
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise ProviderUnavailableError(f"malformed completion response: {exc}") from exc

    def complete(self, bundle: PromptBundle) -> ChatExchange:
        """Send one prompt, retrying transient failures with backoff.

        The prompt text is passed through byte-for-byte; the provider
        layer never rewrites what the agent built.
        """
        payload = {
            "model": self.config.model_id,
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {"role": "user", "content": bundle.user_text},
            ],
            "temperature": self.config.temperature,
        }
        policy = self.config.retry
        start = time.monotonic()
        last_error: Exception | None = None
        for attempt in range(1, policy.max_attempts + 1):
            try:
                with self._gate:
                    text = self._send(payload)
            except TransientProviderError as exc:
                last_error = exc
                if attempt < policy.max_attempts:
                    self._sleep(policy.delay(attempt))
                continue
            return ChatExchange(
                request=bundle,
                response=text,
                latency=time.monotonic() - start,
                attempts_used=attempt,
            )
        raise ProviderUnavailableError(
            f"provider unavailable after {policy.max_attempts} attempts: {last_error}"
        )


class ScriptedProvider:
    """Deterministic provider that replays canned responses in order.

    Exhausting the script repeats its final entry, so a loop that keeps
    asking gets a stable answer.  Safe to share across threads, though a
    benchmark wanting per-case determinism should give each session its
    own instance.
    """

    model_id = "scripted"

    def __init__(self, script: Sequence[str]) -> None:
        if not script:
            raise ValueError("script must be non-empty")
        self._script = list(script)
        self._next = 0
        self._lock = threading.Lock()

    def complete(self, bundle: PromptBundle) -> ChatExchange:
        start = time.monotonic()
        with self._lock:
            index = min(self._next, len(self._script) - 1)
            self._next += 1
        return ChatExchange(
            request=bundle,
            response=self._script[index],
            latency=time.monotonic() - start,
            attempts_used=1,
        )


def scripted_provider(script: Sequence[str]) -> ScriptedProvider:
    return ScriptedProvider(script)
