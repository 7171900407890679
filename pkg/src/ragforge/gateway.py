"""Client for chat-completion and embedding endpoints speaking the standard
JSON-over-HTTP wire protocol, plus a deterministic in-process stub.

One profile type covers every role in the pipeline (generator, embedder,
judge, answer candidates); any server exposing `/v1/chat/completions` and
`/v1/embeddings` can fill any role. Retries use exponential backoff with
additive jitter and apply only to timeouts, rate limits, and server errors.
Credentials are read from the environment at request time and never logged.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass

import numpy as np
import requests

logger = logging.getLogger(__name__)


class GatewayError(Exception):
    pass


class Timeout(GatewayError):
    pass


class RateLimited(GatewayError):
    pass


class ServerError(GatewayError):
    pass


class BadRequest(GatewayError):
    """Non-retryable client-side request error."""


class ExhaustedRetries(GatewayError):
    """All configured attempts failed; `last_error` holds the final cause."""

    def __init__(self, message: str, last_error: GatewayError | None = None) -> None:
        super().__init__(message)
        self.last_error = last_error


@dataclass(frozen=True)
class EndpointProfile:
    base_url: str
    model: str
    credential_ref: str = ""
    timeout: float = 30.0
    max_attempts: int = 4
    max_concurrent: int = 4

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")


_ROLES = ("system", "user", "assistant")


@dataclass(frozen=True)
class ChatTurn:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in _ROLES:
            raise ValueError(f"role must be one of {_ROLES}, got {self.role!r}")
        if not self.content and self.role != "assistant":
            raise ValueError("content may be empty only for assistant prefill")


@dataclass(frozen=True)
class CompletionParams:
    temperature: float = 0.7
    max_output_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


# Generation wants diversity; judging wants determinism.
DEFAULT_GENERATION_PARAMS = CompletionParams(temperature=0.7)
DEFAULT_JUDGE_PARAMS = CompletionParams(temperature=0.0)


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    total_tokens: int = 0


@dataclass(frozen=True)
class Completion:
    text: str
    usage: TokenUsage


def prompt_hash(messages: list[ChatTurn]) -> str:
    """Stable hex digest of a message list, used for logging and provenance."""
    payload = json.dumps([[m.role, m.content] for m in messages], ensure_ascii=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _validate_messages(messages: list[ChatTurn]) -> None:
    if not messages:
        raise ValueError("messages must be non-empty")


def _validate_texts(texts: list[str]) -> None:
    if not texts:
        raise ValueError("texts must be non-empty")
    for i, text in enumerate(texts):
        if not text:
            raise ValueError(f"texts[{i}] is empty")


def _as_int(value) -> int:
    try:
        return int(value)
    except (TypeError, ValueError):
        return 0


class HttpGateway:
    """Shared, thread-safe client enforcing per-profile concurrency caps."""

    def __init__(
        self,
        *,
        embed_batch_size: int = 32,
        backoff_base: float = 0.5,
        sleep=time.sleep,
        rng: random.Random | None = None,
        session: requests.Session | None = None,
    ) -> None:
        if embed_batch_size < 1:
            raise ValueError("embed_batch_size must be >= 1")
        self.embed_batch_size = embed_batch_size
        self.backoff_base = backoff_base
        self._sleep = sleep
        self._rng = rng or random.Random()
        self._session = session or requests.Session()
        self._limiters: dict[EndpointProfile, threading.BoundedSemaphore] = {}
        self._lock = threading.Lock()

    def _limiter(self, profile: EndpointProfile) -> threading.BoundedSemaphore:
        with self._lock:
            limiter = self._limiters.get(profile)
            if limiter is None:
                limiter = threading.BoundedSemaphore(profile.max_concurrent)
                self._limiters[profile] = limiter
            return limiter

    def _post_once(self, profile: EndpointProfile, path: str, payload: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if profile.credential_ref:
            secret = os.environ.get(profile.credential_ref, "")
            if secret:
                headers["Authorization"] = f"Bearer {secret}"
        url = profile.base_url.rstrip("/") + path
        limiter = self._limiter(profile)
        with limiter:
            try:
                response = self._session.post(
                    url, json=payload, headers=headers, timeout=profile.timeout
                )
            except requests.Timeout as exc:
                raise Timeout(f"request to {path} timed out after {profile.timeout}s") from exc
            except requests.ConnectionError as exc:
                raise ServerError(f"connection to {path} failed") from exc
        if response.status_code == 429:
            raise RateLimited(f"{path}: HTTP 429")
        if response.status_code >= 500:
            raise ServerError(f"{path}: HTTP {response.status_code}")
        if response.status_code >= 400:
            raise BadRequest(f"{path}: HTTP {response.status_code}")
        try:
            return response.json()
        except ValueError as exc:
            raise ServerError(f"{path}: response is not valid JSON") from exc

    def _post_with_retries(self, profile: EndpointProfile, path: str, payload: dict) -> dict:
        last: GatewayError | None = None
        for attempt in range(1, profile.max_attempts + 1):
            try:
                return self._post_once(profile, path, payload)
            except (Timeout, RateLimited, ServerError) as exc:
                last = exc
                logger.info(
                    "retryable failure on %s (attempt %d/%d): %s",
                    path,
                    attempt,
                    profile.max_attempts,
                    exc,
                )
                if attempt == profile.max_attempts:
                    break
                delay = self.backoff_base * (2 ** (attempt - 1))
                delay += self._rng.uniform(0, self.backoff_base)
                self._sleep(delay)
        raise ExhaustedRetries(
            f"{path}: gave up after {profile.max_attempts} attempts ({last})",
            last_error=last,
        )

    def chat_complete(
        self,
        profile: EndpointProfile,
        messages: list[ChatTurn],
        params: CompletionParams = DEFAULT_GENERATION_PARAMS,
    ) -> Completion:
        _validate_messages(messages)
        payload: dict = {
            "model": profile.model,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
            "temperature": params.temperature,
            "max_tokens": params.max_output_tokens,
        }
        if params.seed is not None:
            payload["seed"] = params.seed
        digest = prompt_hash(messages)
        body = self._post_with_retries(profile, "/v1/chat/completions", payload)
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ServerError("chat response missing choices[0].message.content") from exc
        if not isinstance(text, str):
            raise ServerError(f"chat response content is {type(text).__name__}, not text")
        usage = body.get("usage") or {}
        completion = Completion(
            text=text,
            usage=TokenUsage(
                prompt_tokens=_as_int(usage.get("prompt_tokens")),
                completion_tokens=_as_int(usage.get("completion_tokens")),
                total_tokens=_as_int(usage.get("total_tokens")),
            ),
        )
        logger.info(
            "chat_complete model=%s prompt_hash=%s completion_chars=%d",
            profile.model,
            digest,
            len(text),
        )
        return completion

    def embed_texts(self, profile: EndpointProfile, texts: list[str]) -> list[list[float]]:
        _validate_texts(texts)
        vectors: list[list[float]] = []
        for start in range(0, len(texts), self.embed_batch_size):
            batch = texts[start : start + self.embed_batch_size]
            body = self._post_with_retries(
                profile, "/v1/embeddings", {"model": profile.model, "input": batch}
            )
            try:
                rows = sorted(body["data"], key=lambda d: d["index"])
                batch_vectors = [[float(x) for x in row["embedding"]] for row in rows]
            except (KeyError, TypeError) as exc:
                raise ServerError("embeddings response missing data[].embedding") from exc
            if len(batch_vectors) != len(batch):
                raise ServerError(
                    f"embeddings response has {len(batch_vectors)} rows for {len(batch)} inputs"
                )
            vectors.extend(batch_vectors)
        dims = {len(v) for v in vectors}
        if len(dims) > 1:
            raise ServerError(f"inconsistent embedding dimensions {sorted(dims)}")
        logger.info("embed_texts model=%s texts=%d", profile.model, len(texts))
        return vectors


def _hash_unit_vector(text: str, dim: int) -> list[float]:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    vector = rng.standard_normal(dim)
    vector /= float(np.linalg.norm(vector))
    return [float(x) for x in vector]


class StubGateway:
    """Deterministic in-process stand-in for both endpoint kinds.

    Chat responses come from a script keyed by prompt_hash(messages); values
    may be strings or callables taking (profile, messages). Unknown prompts
    fall back to `fallback` (string or callable). Embeddings are unit vectors
    derived from a hash of the text, so identical inputs always embed
    identically and distinct texts almost surely differ.
    """

    def __init__(
        self,
        script: dict[str, object] | None = None,
        *,
        fallback: object = "UNKNOWN",
        embed_dim: int = 64,
    ) -> None:
        if embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        self.script = dict(script or {})
        self.fallback = fallback
        self.embed_dim = embed_dim
        self.chat_requests: list[tuple[EndpointProfile, list[ChatTurn], CompletionParams]] = []
        self.embed_requests: list[list[str]] = []
        self._lock = threading.Lock()

    def chat_complete(
        self,
        profile: EndpointProfile,
        messages: list[ChatTurn],
        params: CompletionParams = DEFAULT_GENERATION_PARAMS,
    ) -> Completion:
        _validate_messages(messages)
        with self._lock:
            self.chat_requests.append((profile, list(messages), params))
        responder = self.script.get(prompt_hash(messages), self.fallback)
        text = responder(profile, messages) if callable(responder) else str(responder)
        prompt_tokens = sum(len(m.content.split()) for m in messages)
        return Completion(
            text=text,
            usage=TokenUsage(
                prompt_tokens=prompt_tokens,
                completion_tokens=len(text.split()),
                total_tokens=prompt_tokens + len(text.split()),
            ),
        )

    def embed_texts(self, profile: EndpointProfile, texts: list[str]) -> list[list[float]]:
        _validate_texts(texts)
        with self._lock:
            self.embed_requests.append(list(texts))
        return [_hash_unit_vector(text, self.embed_dim) for text in texts]


def stub_gateway(
    script: dict[str, object] | None = None,
    *,
    fallback: object = "UNKNOWN",
    embed_dim: int = 64,
) -> StubGateway:
    """Scripted gateway: maps prompt-content hashes to canned responses."""
    return StubGateway(script, fallback=fallback, embed_dim=embed_dim)


def stub_profile(role: str) -> EndpointProfile:
    """Profile wired to nothing; pair it with a StubGateway."""
    return EndpointProfile(base_url="stub://local", model=f"stub-{role}")
