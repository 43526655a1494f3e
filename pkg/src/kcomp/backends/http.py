"""HTTP clients for the five wire contracts (/embed, /generate, /rerank, /ner).

Every client shares one retry policy: exponential backoff on transport
failures and 5xx, no retry on 4xx, and a per-client bound on requests in
flight.
"""
from __future__ import annotations

import logging
import threading
import time
from typing import Callable, Optional, Sequence

import httpx

from .base import (
    BackendConfig,
    ClientRequestError,
    GenerateRequest,
    GenerateResponse,
    NERSpan,
    ProtocolError,
    TransportError,
    apply_stop,
)

log = logging.getLogger(__name__)


class HTTPBackend:
    path = "/"

    def __init__(
        self,
        config: BackendConfig,
        transport: Optional[httpx.BaseTransport] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        headers = {"Content-Type": "application/json"}
        if config.auth_token:
            headers["Authorization"] = f"Bearer {config.auth_token}"
        self._client = httpx.Client(
            base_url=config.base_url,
            timeout=config.timeout_ms / 1000.0,
            headers=headers,
            transport=transport,
        )
        self._slots = threading.BoundedSemaphore(config.max_inflight)
        self._sleep = sleep
        self.calls = 0

    def close(self) -> None:
        self._client.close()

    def post(self, payload: dict) -> tuple[dict, int]:
        """POST ``payload`` to this backend's path; return (json body, attempts used)."""
        attempt_log: list[str] = []
        for attempt in range(1, self.config.max_attempts + 1):
            with self._slots:
                self.calls += 1
                try:
                    resp = self._client.post(self.path, json=payload)
                except httpx.TransportError as exc:
                    attempt_log.append(f"attempt {attempt}: {type(exc).__name__}: {exc}")
                    resp = None
            if resp is not None:
                if 400 <= resp.status_code < 500:
                    raise ClientRequestError(resp.status_code, resp.text, attempts=attempt)
                if resp.status_code < 400:
                    try:
                        return resp.json(), attempt
                    except ValueError as exc:
                        raise ProtocolError(f"{self.path}: response is not JSON") from exc
                attempt_log.append(f"attempt {attempt}: HTTP {resp.status_code}")
            if attempt < self.config.max_attempts:
                delay = self.config.backoff_s * (2 ** (attempt - 1))
                log.debug("%s retry in %.2fs (%s)", self.path, delay, attempt_log[-1])
                self._sleep(delay)
        raise TransportError(
            f"{self.path}: giving up after {self.config.max_attempts} attempts",
            attempts=self.config.max_attempts,
            attempt_log=attempt_log,
        )


def _require(body: dict, key: str, kind, path: str):
    if not isinstance(body, dict) or key not in body:
        raise ProtocolError(f"{path}: missing field {key!r}")
    value = body[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise ProtocolError(f"{path}: field {key!r} has type {type(value).__name__}")
    return value


class EmbedClient(HTTPBackend):
    path = "/embed"

    def embed(self, texts: Sequence[str], prefix: str = "") -> list[list[float]]:
        body, _ = self.post({"texts": list(texts), "prefix": prefix})
        vectors = _require(body, "vectors", list, self.path)
        dim = _require(body, "dim", int, self.path)
        if len(vectors) != len(texts):
            raise ProtocolError(f"/embed: {len(vectors)} vectors for {len(texts)} texts")
        for v in vectors:
            if not isinstance(v, list) or len(v) != dim:
                raise ProtocolError("/embed: vector length disagrees with dim")
        return [[float(x) for x in v] for v in vectors]


class GenerateClient(HTTPBackend):
    path = "/generate"

    def generate(self, request: GenerateRequest) -> GenerateResponse:
        body, attempts = self.post(request.to_payload())
        text = _require(body, "text", str, self.path)
        prompt_tokens = _require(body, "prompt_tokens", int, self.path)
        completion_tokens = _require(body, "completion_tokens", int, self.path)
        # servers are not trusted to have applied the stop list
        return GenerateResponse(
            text=apply_stop(text, request.stop),
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            attempts=attempts,
        )


class RerankClient(HTTPBackend):
    path = "/rerank"

    def rerank(self, query: str, candidates: Sequence[str]) -> list[float]:
        body, _ = self.post({"query": query, "candidates": list(candidates)})
        scores = _require(body, "scores", list, self.path)
        if len(scores) != len(candidates):
            raise ProtocolError(f"/rerank: {len(scores)} scores for {len(candidates)} candidates")
        try:
            return [float(s) for s in scores]
        except (TypeError, ValueError) as exc:
            raise ProtocolError("/rerank: non-numeric score") from exc


class NERClient(HTTPBackend):
    path = "/ner"

    def ner(self, text: str) -> list[NERSpan]:
        body, _ = self.post({"text": text})
        spans = _require(body, "spans", list, self.path)
        out = []
        for s in spans:
            if not isinstance(s, dict):
                raise ProtocolError("/ner: span is not an object")
            start = _require(s, "start", int, self.path)
            end = _require(s, "end", int, self.path)
            out.append(NERSpan(start, end, str(s.get("label", ""))))
        return out
