import json
import logging
import threading
import time

import httpx
import numpy as np
import pytest

from kbprobe.gateway import (
    AuthenticationError,
    ChatRequest,
    ChatResponse,
    DimensionMismatchError,
    Gateway,
    GatewayError,
    MalformedResponseError,
    Message,
    OpenAICompatBackend,
    RateLimitError,
    RetryPolicy,
    ServerError,
    TransportError,
    estimate_tokens,
)
from kbprobe.sim_oracle import SimBackend


class RecordingBackend:
    """Deterministic fake that logs every call it receives."""

    def __init__(self, dim=8, usage=(100, 50), embed_tokens=None):
        self.calls = []
        self.dim = dim
        self.usage = usage
        self.embed_tokens = embed_tokens
        self.lock = threading.Lock()

    def chat(self, request):
        with self.lock:
            self.calls.append(("chat", request))
        return ChatResponse("- ok", *self.usage)

    def embed(self, texts, model_id):
        with self.lock:
            self.calls.append(("embed", list(texts)))
        rows = []
        for t in texts:
            rng = np.random.default_rng(abs(hash(t)) % 2**32)
            rows.append(rng.standard_normal(self.dim) * 3)
        return np.array(rows), self.embed_tokens


class FlakyBackend(RecordingBackend):
    def __init__(self, failures, exc=ServerError):
        super().__init__()
        self.failures = failures
        self.exc = exc

    def chat(self, request):
        with self.lock:
            self.calls.append(("chat", request))
            if self.failures > 0:
                self.failures -= 1
                raise self.exc("boom")
        return ChatResponse("fine", 10, 5)


def gw(backend, **kw):
    kw.setdefault("sleep", lambda s: None)
    return Gateway(backends={"fake:": backend}, **kw)


def test_request_validation():
    with pytest.raises(ValueError):
        ChatRequest("m", ())
    with pytest.raises(ValueError):
        ChatRequest("m", (Message("robot", "hi"),))
    with pytest.raises(ValueError):
        ChatRequest.user("m", "hi", temperature=-0.1)
    with pytest.raises(ValueError):
        ChatResponse("x", -1, 0)


def test_empty_ledger():
    assert gw(RecordingBackend()).cost_ledger() == (0, 0)


def test_ledger_adds_chat_and_embed():
    g = gw(RecordingBackend(usage=(100, 50), embed_tokens=20))
    g.chat(ChatRequest.user("fake:m", "hello"))
    g.embed(["one text"], "fake:e")
    assert g.cost_ledger() == (150, 20)


def test_embed_batches_of_128():
    b = RecordingBackend()
    g = gw(b)
    batch = g.embed([f"text {i}" for i in range(300)], "fake:e")
    sizes = [len(c[1]) for c in b.calls if c[0] == "embed"]
    assert sizes == [128, 128, 44]
    assert batch.vectors.shape == (300, 8)
    assert np.allclose(np.linalg.norm(batch.vectors, axis=1), 1.0)


def test_batching_invariance():
    texts = [f"text {i}" for i in range(70)]
    a = gw(RecordingBackend(), batch_size=128).embed(texts, "fake:e").vectors
    b = gw(RecordingBackend(), batch_size=16).embed(texts, "fake:e").vectors
    assert np.array_equal(a, b)


def test_embed_preconditions():
    g = gw(RecordingBackend())
    with pytest.raises(ValueError):
        g.embed([], "fake:e")
    with pytest.raises(ValueError):
        g.embed(["ok", "  "], "fake:e")


def test_dimension_mismatch_across_batches():
    class Shifty(RecordingBackend):
        def embed(self, texts, model_id):
            self.dim += 1
            return super().embed(texts, model_id)

    with pytest.raises(DimensionMismatchError):
        gw(Shifty(), batch_size=2).embed(["a", "b", "c"], "fake:e")


def test_retry_then_success_counts_tokens_once():
    b = FlakyBackend(failures=2)
    delays = []
    g = gw(b, sleep=delays.append, retry=RetryPolicy(max_attempts=3, base_delay=0.5))
    r = g.chat(ChatRequest.user("fake:m", "hi"))
    assert r.text == "fine"
    assert len(b.calls) == 3
    assert delays == [0.5, 1.0]
    assert g.cost_ledger() == (15, 0)


def test_retries_exhausted():
    b = FlakyBackend(failures=5, exc=RateLimitError)
    g = gw(b)
    with pytest.raises(RateLimitError):
        g.chat(ChatRequest.user("fake:m", "hi"))
    assert len(b.calls) == 3
    assert g.cost_ledger() == (0, 0)


def test_auth_errors_are_not_retried():
    b = FlakyBackend(failures=5, exc=AuthenticationError)
    with pytest.raises(AuthenticationError):
        gw(b).chat(ChatRequest.user("fake:m", "hi"))
    assert len(b.calls) == 1


def test_unrouted_model():
    with pytest.raises(GatewayError):
        gw(RecordingBackend()).chat(ChatRequest.user("other:m", "hi"))


def test_concurrency_bounds():
    with pytest.raises(ValueError):
        Gateway(concurrency=0)
    with pytest.raises(ValueError):
        Gateway(concurrency=65)
    assert Gateway().concurrency == 32


def test_in_flight_limit_is_enforced():
    class Slow(RecordingBackend):
        active = 0
        peak = 0

        def chat(self, request):
            with self.lock:
                Slow.active += 1
                Slow.peak = max(Slow.peak, Slow.active)
            time.sleep(0.01)
            with self.lock:
                Slow.active -= 1
            return ChatResponse("x", 1, 1)

    g = gw(Slow(), concurrency=3)
    threads = [threading.Thread(target=g.chat, args=(ChatRequest.user("fake:m", f"p{i}"),)) for i in range(12)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert Slow.peak <= 3
    assert g.cost_ledger() == (24, 0)


def test_sim_chat_is_deterministic(corpus):
    req = ChatRequest.user("sim:demo", "List facts about Deep Learning.", seed=7)
    a = Gateway(backends={"sim:": SimBackend(corpus, seed=7)}).chat(req)
    b = Gateway(backends={"sim:": SimBackend(corpus, seed=7)}).chat(req)
    assert a == b
    assert a.text.startswith("- ")


def test_sim_embed_twice_identical(sim_gateway):
    a = sim_gateway.embed(["same text"], "sim:embed").vectors
    b = sim_gateway.embed(["same text"], "sim:embed").vectors
    assert np.array_equal(a, b)


def test_estimate_tokens():
    assert estimate_tokens("") == 0
    assert estimate_tokens("abcd") == 1
    assert estimate_tokens("abcde") == 2
    assert estimate_tokens("x" * 401) == 101


# -- wire client ------------------------------------------------------------

def wire(handler, **kw):
    return OpenAICompatBackend("http://test", api_key="sk-secret", transport=httpx.MockTransport(handler), **kw)


def test_wire_chat_payload_and_usage():
    seen = {}

    def handler(request):
        seen["path"] = request.url.path
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(
            200,
            json={"choices": [{"message": {"content": "- a"}}], "usage": {"prompt_tokens": 12, "completion_tokens": 3}},
        )

    r = wire(handler).chat(ChatRequest.user("gpt", "hi", temperature=0.0, seed=4))
    assert seen["path"] == "/v1/chat/completions"
    assert seen["auth"] == "Bearer sk-secret"
    assert seen["body"]["messages"] == [{"role": "user", "content": "hi"}]
    assert seen["body"]["temperature"] == 0.0 and seen["body"]["seed"] == 4
    assert (r.text, r.prompt_tokens, r.completion_tokens, r.estimated) == ("- a", 12, 3, False)


def test_wire_missing_usage_is_estimated():
    def handler(request):
        return httpx.Response(200, json={"choices": [{"message": {"content": "abcdefgh"}}]})

    r = wire(handler).chat(ChatRequest.user("gpt", "hello world"))
    assert r.estimated
    assert (r.prompt_tokens, r.completion_tokens) == (3, 2)


@pytest.mark.parametrize(
    "status,exc", [(401, AuthenticationError), (403, AuthenticationError), (429, RateLimitError), (503, ServerError)]
)
def test_wire_status_mapping(status, exc):
    with pytest.raises(exc):
        wire(lambda r: httpx.Response(status, text="nope")).chat(ChatRequest.user("gpt", "hi"))


def test_wire_malformed_body():
    with pytest.raises(MalformedResponseError):
        wire(lambda r: httpx.Response(200, json={"oops": 1})).chat(ChatRequest.user("gpt", "hi"))
    with pytest.raises(MalformedResponseError):
        wire(lambda r: httpx.Response(200, text="<html>")).chat(ChatRequest.user("gpt", "hi"))


def test_unreachable_host_fails_after_max_attempts():
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("refused", request=request)

    g = Gateway(default=wire(handler), sleep=lambda s: None)
    with pytest.raises(TransportError):
        g.chat(ChatRequest.user("gpt", "hi"))
    assert len(calls) == 3


def test_wire_embeddings_sorted_by_index():
    def handler(request):
        body = json.loads(request.content)
        assert request.url.path == "/v1/embeddings"
        data = [{"index": i, "embedding": [float(i + 1), 0.0]} for i in range(len(body["input"]))]
        return httpx.Response(200, json={"data": data[::-1], "usage": {"prompt_tokens": 7}})

    g = Gateway(default=wire(handler))
    batch = g.embed(["a", "b", "c"], "emb")
    assert np.array_equal(batch.vectors, np.array([[1.0, 0.0]] * 3))
    assert batch.embedding_tokens == 7


def test_trace_redacts_key(caplog):
    def handler(request):
        return httpx.Response(500, text="server says sk-secret")

    with caplog.at_level(logging.INFO, logger="kbprobe.wire"):
        with pytest.raises(ServerError):
            wire(handler, trace=True).chat(ChatRequest.user("gpt", "hi"))
    assert caplog.records
    assert "sk-secret" not in caplog.text
