"""Chat and embedding access with retries, bounded concurrency and token accounting.

Backends are routed by model-id prefix; anything without a registered prefix
goes to the default backend (normally the OpenAI-compatible HTTP client).
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import httpx
import numpy as np
from tenacity import Retrying, retry_if_exception, stop_after_attempt, wait_exponential

from .core import KBProbeError

log = logging.getLogger(__name__)
wire_log = logging.getLogger("kbprobe.wire")

API_KEY_ENV = "KBPROBE_API_KEY"
ROLES = ("system", "user", "assistant")
EMBED_BATCH_LIMIT = 128
EXTRACTION_TEMPERATURE = 0.7
JUDGE_TEMPERATURE = 0.0


class GatewayError(KBProbeError):
    retryable = False


class TransportError(GatewayError):
    retryable = True


class RateLimitError(TransportError):
    pass


class ServerError(TransportError):
    pass


class AuthenticationError(GatewayError):
    pass


class MalformedResponseError(GatewayError):
    pass


class DimensionMismatchError(GatewayError, ValueError):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    content: str


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    messages: tuple[Message, ...]
    temperature: float = EXTRACTION_TEMPERATURE
    max_output_tokens: int = 2048
    # forwarded as the OpenAI `seed` parameter; the simulator mixes it into its stream
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a chat request needs at least one message")
        for m in self.messages:
            if m.role not in ROLES:
                raise ValueError(f"unknown role {m.role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @classmethod
    def user(cls, model_id: str, prompt: str, **kwargs) -> "ChatRequest":
        return cls(model_id=model_id, messages=(Message("user", prompt),), **kwargs)

    @property
    def prompt(self) -> str:
        return "\n".join(m.content for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int
    estimated: bool = False

    def __post_init__(self):
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be >= 0")

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class EmbeddingBatch:
    texts: tuple[str, ...]
    vectors: np.ndarray = field(repr=False)
    embedding_tokens: int = 0

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.texts):
            raise DimensionMismatchError("vectors do not align with texts")
        norms = np.linalg.norm(self.vectors, axis=1)
        if len(norms) and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("embedding vectors must have unit norm")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_delay: float = 0.5
    multiplier: float = 2.0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


class Backend(Protocol):
    def chat(self, request: ChatRequest) -> ChatResponse: ...

    def embed(self, texts: Sequence[str], model_id: str) -> tuple[np.ndarray, Optional[int]]:
        """Return raw vectors and the reported token usage (None if not reported)."""
        ...


class CostLedger:
    """Cumulative generation and embedding token counters, updated atomically."""

    def __init__(self):
        self._lock = threading.Lock()
        self.generation_tokens = 0
        self.embedding_tokens = 0

    def add_generation(self, n: int) -> None:
        with self._lock:
            self.generation_tokens += n

    def add_embedding(self, n: int) -> None:
        with self._lock:
            self.embedding_tokens += n

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self.generation_tokens, self.embedding_tokens


class OpenAICompatBackend:
    """Client for POST /v1/chat/completions and POST /v1/embeddings."""

    def __init__(
        self,
        base_url: str,
        api_key: Optional[str] = None,
        timeout: float = 120.0,
        transport: Optional[httpx.BaseTransport] = None,
        trace: bool = False,
    ):
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        self.client = httpx.Client(
            base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport
        )
        self.trace = trace

    def _redact(self, s: str) -> str:
        return s.replace(self.api_key, "***") if self.api_key else s

    def _post(self, path: str, payload: dict) -> dict:
        if self.trace:
            wire_log.info(self._redact(f"POST {path} {json.dumps(payload)[:4000]}"))
        try:
            resp = self.client.post(path, json=payload)
        except httpx.TimeoutException as exc:
            raise TransportError(f"timeout on {path}: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransportError(self._redact(f"transport failure on {path}: {exc}")) from exc
        if self.trace:
            wire_log.info(self._redact(f"<- {resp.status_code} {resp.text[:4000]}"))
        if resp.status_code in (401, 403):
            raise AuthenticationError(f"{path}: HTTP {resp.status_code}")
        if resp.status_code == 429:
            raise RateLimitError(f"{path}: rate limited")
        if resp.status_code >= 500:
            raise ServerError(f"{path}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise GatewayError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedResponseError(f"{path}: body is not JSON") from exc

    def chat(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": request.model_id,
            "messages": [{"role": m.role, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.seed is not None:
            payload["seed"] = request.seed
        data = self._post("/v1/chat/completions", payload)
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise MalformedResponseError("chat response lacks choices[0].message.content") from exc
        usage = data.get("usage") or {}
        pt, ct = usage.get("prompt_tokens"), usage.get("completion_tokens")
        if pt is None or ct is None:
            return ChatResponse(
                text, estimate_tokens(request.prompt), estimate_tokens(text), estimated=True
            )
        return ChatResponse(text, int(pt), int(ct))

    def embed(self, texts: Sequence[str], model_id: str) -> tuple[np.ndarray, Optional[int]]:
        data = self._post("/v1/embeddings", {"model": model_id, "input": list(texts)})
        try:
            items = sorted(data["data"], key=lambda d: d["index"])
            vectors = [item["embedding"] for item in items]
        except (KeyError, TypeError) as exc:
            raise MalformedResponseError("embedding response lacks data[].embedding") from exc
        if len(vectors) != len(texts):
            raise MalformedResponseError(f"got {len(vectors)} vectors for {len(texts)} texts")
        if len({len(v) for v in vectors}) > 1:
            raise DimensionMismatchError("backend returned vectors of differing dimension")
        usage = data.get("usage") or {}
        ntok = usage.get("prompt_tokens", usage.get("total_tokens"))
        return np.asarray(vectors, dtype=np.float64), (int(ntok) if ntok is not None else None)


class Gateway:
    """Front door for every model call made during a run.

    Safe to share between threads: the in-flight limit is a semaphore and the
    ledger is lock-protected.  Usage is recorded only after a call succeeds,
    so retries never double-count tokens.
    """

    def __init__(
        self,
        backends: Optional[dict[str, Backend]] = None,
        default: Optional[Backend] = None,
        concurrency: int = 32,
        retry: RetryPolicy = RetryPolicy(),
        batch_size: int = EMBED_BATCH_LIMIT,
        sleep: Callable[[float], None] = time.sleep,
        record: bool = False,
    ):
        if not 1 <= concurrency <= 64:
            raise ValueError("concurrency must lie in 1..64")
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.backends = dict(backends or {})
        self.default = default
        self.concurrency = concurrency
        self.retry = retry
        self.batch_size = batch_size
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(concurrency)
        self.ledger = CostLedger()
        self.record = record
        self.transcript: list[tuple[ChatRequest, ChatResponse]] = []
        self._transcript_lock = threading.Lock()

    def route(self, model_id: str) -> Backend:
        for prefix, backend in self.backends.items():
            if model_id.startswith(prefix):
                return backend
        if self.default is None:
            raise GatewayError(f"no backend configured for model {model_id!r}")
        return self.default

    def start_run(self) -> None:
        self.ledger = CostLedger()
        with self._transcript_lock:
            self.transcript = []

    def cost_ledger(self) -> tuple[int, int]:
        return self.ledger.snapshot()

    def _with_retries(self, fn: Callable):
        # the slot is held per attempt, never across a backoff sleep
        def attempt():
            with self._slots:
                return fn()

        retrying = Retrying(
            stop=stop_after_attempt(self.retry.max_attempts),
            wait=wait_exponential(multiplier=self.retry.base_delay, exp_base=self.retry.multiplier),
            retry=retry_if_exception(lambda e: isinstance(e, GatewayError) and e.retryable),
            sleep=self._sleep,
            before_sleep=lambda rs: log.warning(
                "attempt %d failed (%s); retrying", rs.attempt_number, rs.outcome.exception()
            ),
            reraise=True,
        )
        return retrying(attempt)

    def chat(self, request: ChatRequest) -> ChatResponse:
        backend = self.route(request.model_id)
        response = self._with_retries(lambda: backend.chat(request))
        if not isinstance(response, ChatResponse):
            raise MalformedResponseError("backend returned a non-response object")
        self.ledger.add_generation(response.total_tokens)
        if self.record:
            with self._transcript_lock:
                self.transcript.append((request, response))
        return response

    def embed(self, texts: Sequence[str], model_id: str) -> EmbeddingBatch:
        texts = list(texts)
        if not texts:
            raise ValueError("embed needs at least one text")
        if any(not t.strip() for t in texts):
            raise ValueError("cannot embed empty text")
        backend = self.route(model_id)
        chunks, tokens = [], 0
        for start in range(0, len(texts), self.batch_size):
            chunk = texts[start : start + self.batch_size]
            vecs, ntok = self._with_retries(lambda: backend.embed(chunk, model_id))
            vecs = np.asarray(vecs, dtype=np.float64)
            if vecs.ndim != 2 or vecs.shape[0] != len(chunk):
                raise MalformedResponseError("backend returned misaligned vectors")
            if chunks and vecs.shape[1] != chunks[0].shape[1]:
                raise DimensionMismatchError(
                    f"dimension {vecs.shape[1]} differs from {chunks[0].shape[1]}"
                )
            n = ntok if ntok is not None else sum(estimate_tokens(t) for t in chunk)
            self.ledger.add_embedding(n)
            tokens += n
            chunks.append(vecs)
        vectors = np.vstack(chunks)
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise MalformedResponseError("backend returned a zero vector")
        return EmbeddingBatch(tuple(texts), vectors / norms, tokens)
