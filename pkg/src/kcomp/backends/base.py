"""Shared types for every backend: configs, request/response records, errors."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence


class BackendError(Exception):
    """Base class for failures talking to an embedding/generation/rerank/NER service."""

    retryable = False


class TransportError(BackendError):
    """Retries exhausted. ``attempts`` is the number of requests actually sent."""

    retryable = True

    def __init__(self, message: str, attempts: int, attempt_log: Sequence[str] = ()):
        super().__init__(message)
        self.attempts = attempts
        self.attempt_log = list(attempt_log)


class ClientRequestError(BackendError):
    """4xx from the service. Never retried."""

    def __init__(self, status: int, body: str, attempts: int = 1):
        super().__init__(f"HTTP {status}: {body[:200]}")
        self.status = status
        self.body = body
        self.attempts = attempts


class ProtocolError(BackendError):
    """Response did not match the wire contract."""


class EmbeddingConfigError(BackendError):
    """Vectors of inconsistent dimension within one batch or index."""


@dataclass
class BackendConfig:
    base_url: str
    timeout_ms: int = 30000
    max_retries: int = 3
    max_inflight: int = 4
    auth_token: Optional[str] = field(default=None, repr=False)
    backoff_s: float = 0.5

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_inflight < 1:
            raise ValueError("max_inflight must be >= 1")

    @property
    def max_attempts(self) -> int:
        return self.max_retries + 1

    @classmethod
    def from_env(cls, name: str, **overrides) -> "BackendConfig":
        """Read ``KCOMP_<NAME>_URL`` and ``KCOMP_<NAME>_TOKEN``."""
        prefix = f"KCOMP_{name.upper()}"
        url = overrides.pop("base_url", None) or os.environ.get(f"{prefix}_URL")
        if not url:
            raise ValueError(f"no URL for backend {name!r}; set {prefix}_URL")
        token = os.environ.get(f"{prefix}_TOKEN")
        return cls(base_url=url, auth_token=token, **overrides)


@dataclass(frozen=True)
class GenerateRequest:
    prompt: str
    temperature: float = 0.01
    top_p: float = 1.0
    max_new_tokens: int = 512
    stop: tuple[str, ...] = ()

    def to_payload(self) -> dict:
        return {
            "prompt": self.prompt,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_new_tokens": self.max_new_tokens,
            "stop": list(self.stop),
        }


@dataclass(frozen=True)
class GenerateResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    attempts: int = 1


@dataclass(frozen=True)
class NERSpan:
    start: int
    end: int
    label: str = ""


class Embedder(Protocol):
    def embed(self, texts: Sequence[str], prefix: str = "") -> list[list[float]]: ...


class Generator(Protocol):
    def generate(self, request: GenerateRequest) -> GenerateResponse: ...


class Reranker(Protocol):
    def rerank(self, query: str, candidates: Sequence[str]) -> list[float]: ...


class NERBackend(Protocol):
    def ner(self, text: str) -> list[NERSpan]: ...


def apply_stop(text: str, stop: Sequence[str]) -> str:
    """Truncate ``text`` at the earliest occurrence of any stop string."""
    cut = len(text)
    for s in stop:
        if not s:
            continue
        i = text.find(s)
        if i != -1 and i < cut:
            cut = i
    return text[:cut]
