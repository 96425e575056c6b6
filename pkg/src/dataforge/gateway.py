"""Uniform access to chat-completion backends.

One `Endpoint` binds a backend to a model id and a retry policy. Backends:
an OpenAI-compatible HTTP client, a deterministic record/replay pair keyed on
the exact request bytes, and a scripted backend for tests.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Protocol

import httpx

from .core import ForgeError, SamplingConfig

ENV_API_BASE = "FORGE_API_BASE"
ENV_API_KEY = "FORGE_API_KEY"
ENV_MODEL = "FORGE_MODEL"

FINISH_STOP = "stop"
FINISH_LENGTH = "length"
FINISH_ERROR = "error"


class GatewayError(ForgeError):
    """Gateway failure after retries; `cause` is one of auth / malformed /
    transport / exhausted / replay_miss."""

    def __init__(self, message: str, cause: str = "transport"):
        super().__init__(message)
        self.cause = cause


class TransientGatewayError(GatewayError):
    """Retryable failure: transport error, 429, or 5xx."""


class ReplayMiss(GatewayError):
    def __init__(self, request_hash: str):
        super().__init__(f"no recorded completion for request {request_hash}", cause="replay_miss")
        self.request_hash = request_hash


@dataclass(frozen=True)
class ChatMessage:
    role: str  # "system" | "user" | "assistant"
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown chat role: {self.role}")


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    finish_reason: str = FINISH_STOP


def request_key(model: str, messages: list[ChatMessage], cfg: SamplingConfig) -> str:
    """Content hash of the exact request; textually different prompts get distinct keys."""
    payload = {
        "model": model,
        "messages": [[m.role, m.content] for m in messages],
        "temperature": cfg.temperature,
        "top_p": cfg.top_p,
        "max_tokens": cfg.per_turn_token_budget,
        "seed": cfg.seed,
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def estimate_tokens(text: str) -> int:
    """Crude deterministic token estimate used by offline backends."""
    return max(1, len(text) // 4)


def _apply_budget(completion: Completion, budget: int) -> Completion:
    if completion.completion_tokens >= budget and completion.finish_reason == FINISH_STOP:
        return replace(completion, finish_reason=FINISH_LENGTH)
    return completion


class Backend(Protocol):
    def complete_once(
        self, model: str, messages: list[ChatMessage], cfg: SamplingConfig
    ) -> Completion: ...


class HttpBackend:
    """OpenAI-compatible chat-completions over HTTP(S)."""

    def __init__(self, base_url: str, api_key: str = "", request_timeout: float = 60.0):
        if not base_url:
            raise GatewayError("no API base url configured", cause="auth")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self._client = httpx.Client(timeout=request_timeout)

    @classmethod
    def from_env(cls) -> "HttpBackend":
        base = os.environ.get(ENV_API_BASE, "")
        if not base:
            raise GatewayError(f"{ENV_API_BASE} is not set", cause="auth")
        return cls(base_url=base, api_key=os.environ.get(ENV_API_KEY, ""))

    def complete_once(
        self, model: str, messages: list[ChatMessage], cfg: SamplingConfig
    ) -> Completion:
        body = {
            "model": model,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": cfg.temperature,
            "top_p": cfg.top_p,
            "max_tokens": cfg.per_turn_token_budget,
        }
        if cfg.seed is not None:
            body["seed"] = cfg.seed
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self._client.post(
                f"{self.base_url}/chat/completions", json=body, headers=headers
            )
        except httpx.HTTPError as exc:
            raise TransientGatewayError(f"transport failure: {exc}") from exc
        if resp.status_code in (401, 403):
            raise GatewayError(f"authentication failed ({resp.status_code})", cause="auth")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientGatewayError(f"retryable status {resp.status_code}")
        if resp.status_code != 200:
            raise GatewayError(f"unexpected status {resp.status_code}", cause="malformed")
        try:
            data = resp.json()
            choice = data["choices"][0]
            usage = data.get("usage") or {}
            return Completion(
                text=choice["message"]["content"] or "",
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
                finish_reason=choice.get("finish_reason") or FINISH_STOP,
            )
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise GatewayError(f"malformed response: {exc}", cause="malformed") from exc


class ScriptedBackend:
    """Deterministic backend for tests: a responder maps requests to text."""

    def __init__(self, responder: Callable[[str, list[ChatMessage], SamplingConfig], str]):
        self.responder = responder

    def complete_once(
        self, model: str, messages: list[ChatMessage], cfg: SamplingConfig
    ) -> Completion:
        text = self.responder(model, messages, cfg)
        completion = Completion(
            text=text,
            prompt_tokens=sum(estimate_tokens(m.content) for m in messages),
            completion_tokens=estimate_tokens(text),
        )
        return _apply_budget(completion, cfg.per_turn_token_budget)


class ReplayBackend:
    """Serves only completions recorded in a JSON-Lines store; misses raise ReplayMiss."""

    def __init__(self, store: str | Path):
        self.store = Path(store)
        self._entries: dict[str, Completion] = {}
        if self.store.exists():
            with open(self.store, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    row = json.loads(line)
                    c = row["completion"]
                    self._entries[row["request_hash"]] = Completion(
                        text=c["text"],
                        prompt_tokens=c.get("prompt_tokens", 0),
                        completion_tokens=c.get("completion_tokens", 0),
                        finish_reason=c.get("finish_reason", FINISH_STOP),
                    )

    def __len__(self) -> int:
        return len(self._entries)

    def complete_once(
        self, model: str, messages: list[ChatMessage], cfg: SamplingConfig
    ) -> Completion:
        key = request_key(model, messages, cfg)
        if key not in self._entries:
            raise ReplayMiss(key)
        return _apply_budget(self._entries[key], cfg.per_turn_token_budget)


class RecordBackend:
    """Wraps another backend and persists every (request hash, completion) pair."""

    def __init__(self, inner: Backend, store: str | Path):
        self.inner = inner
        self.store = Path(store)
        self.store.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def complete_once(
        self, model: str, messages: list[ChatMessage], cfg: SamplingConfig
    ) -> Completion:
        completion = self.inner.complete_once(model, messages, cfg)
        row = {
            "request_hash": request_key(model, messages, cfg),
            "completion": {
                "text": completion.text,
                "prompt_tokens": completion.prompt_tokens,
                "completion_tokens": completion.completion_tokens,
                "finish_reason": completion.finish_reason,
            },
        }
        with self._lock, open(self.store, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")
        return completion


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    base_delay: float = 0.5
    max_delay: float = 8.0
    deadline: float = 300.0  # hard bound on one complete() call, retries included


class UsageMeter:
    """Thread-safe, monotonically accumulated token usage for one run."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0

    def add(self, completion: Completion) -> None:
        with self._lock:
            self.calls += 1
            self.prompt_tokens += completion.prompt_tokens
            self.completion_tokens += completion.completion_tokens

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {
                "calls": self.calls,
                "prompt_tokens": self.prompt_tokens,
                "completion_tokens": self.completion_tokens,
            }


class Endpoint:
    """A model endpoint: backend + model id + retry policy + in-flight cap."""

    def __init__(
        self,
        backend: Backend,
        model: str,
        name: str = "",
        retry: RetryPolicy | None = None,
        max_concurrency: int = 4,
        usage: UsageMeter | None = None,
    ):
        self.backend = backend
        self.model = model
        self.name = name or model
        self.retry = retry or RetryPolicy()
        self._limiter = threading.Semaphore(max_concurrency)
        self.usage = usage or UsageMeter()

    def complete(self, messages: list[ChatMessage], cfg: SamplingConfig) -> Completion:
        """One completion honoring cfg; transient failures retried with jittered
        exponential backoff under a hard deadline."""
        if not messages:
            raise ValueError("messages must be non-empty")
        started = time.monotonic()
        attempt = 0
        while True:
            try:
                with self._limiter:
                    completion = self.backend.complete_once(self.model, messages, cfg)
                self.usage.add(completion)
                return completion
            except TransientGatewayError as exc:
                attempt += 1
                if attempt > self.retry.max_retries:
                    raise GatewayError(
                        f"retries exhausted after {attempt - 1} retries: {exc}",
                        cause="exhausted",
                    ) from exc
                delay = min(self.retry.max_delay, self.retry.base_delay * (2 ** (attempt - 1)))
                delay *= 0.5 + random.random() / 2
                if time.monotonic() - started + delay > self.retry.deadline:
                    raise GatewayError(
                        f"deadline of {self.retry.deadline}s exceeded: {exc}", cause="exhausted"
                    ) from exc
                time.sleep(delay)
