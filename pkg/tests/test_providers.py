import base64
import json
import threading

import httpx
import pytest

from chartdesc.providers import (
    ChatClient,
    ChatRequest,
    EmbeddingClient,
    EmbeddingVector,
    MalformedJSONError,
    MockChatBackend,
    MockEmbeddingBackend,
    OpenAICompatibleBackend,
    ProviderError,
    RateLimitError,
    ResponseCache,
    TransportError,
    chat_client_from_profile,
    cosine_similarity,
    parse_json_text,
)
from helpers import png_bytes


def no_sleep(_):
    pass


def client(replies, cache=None, **kw):
    return ChatClient(MockChatBackend(replies), "mock-model", cache, sleep=no_sleep, **kw)


def test_request_defaults_and_validation():
    req = ChatRequest("m", "sys", "user")
    assert (req.temperature, req.top_p, req.response_format) == (0.0, 1.0, "text")
    with pytest.raises(ValueError):
        ChatRequest("m", "s", "u", temperature=-0.1)
    with pytest.raises(ValueError):
        ChatRequest("m", "s", "u", response_format="xml")


def test_cache_key_covers_image_bytes():
    a = ChatRequest("m", "s", "u", images=[("image/png", b"one")])
    b = ChatRequest("m", "s", "u", images=[("image/png", b"two")])
    assert a.cache_key() != b.cache_key()
    assert a.cache_key() == ChatRequest("m", "s", "u", images=[("image/png", b"one")]).cache_key()
    assert a.payload()["images"][0]["data"] == base64.b64encode(b"one").decode()


def test_mock_echo():
    c = client("canned reply")
    assert c.chat_complete(c.request("s", "u")).text == "canned reply"


def test_cache_hit_makes_no_network_call(tmp_path):
    c = client("héllo wörld", ResponseCache(tmp_path))
    req = c.request("s", "u")
    first = c.chat_complete(req)
    second = c.chat_complete(req)
    assert c.network_calls == 1 and c.cache_hits == 1
    assert second.text.encode() == first.text.encode()
    assert second.provider_meta["cached"] is True

    fresh = client("something else", ResponseCache(tmp_path))
    assert fresh.chat_complete(req).text == "héllo wörld"
    assert fresh.network_calls == 0


def test_cache_layout_and_sidecar(tmp_path):
    cache = ResponseCache(tmp_path)
    c = client("reply", cache)
    req = c.request("s", "u")
    c.chat_complete(req)
    key = req.cache_key()
    assert (tmp_path / key).read_bytes() == b"reply"
    meta = json.loads((tmp_path / f"{key}.meta.json").read_text())
    assert meta["model_id"] == "mock-model" and "timestamp" in meta
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".tmp-")]


def test_json_mode_retries_then_succeeds():
    c = client(["Sure! Here you go.", "Still prose.", '{"ok": true}'])
    resp = c.chat_complete(c.request("s", "u", json_mode=True))
    assert json.loads(resp.text) == {"ok": True}
    assert resp.provider_meta["json_retries"] == 2
    assert c.network_calls == 3


def test_json_mode_gives_up_with_raw_text(tmp_path):
    c = client("never json", ResponseCache(tmp_path))
    with pytest.raises(MalformedJSONError) as err:
        c.chat_complete(c.request("s", "u", json_mode=True))
    assert err.value.raw_text == "never json"
    assert err.value.attempts == 3
    assert not any(tmp_path.iterdir())  # failures are not cached


def test_json_retry_prompt_is_nudged():
    backend = MockChatBackend(["prose", "{}"])
    c = ChatClient(backend, "m", sleep=no_sleep)
    c.chat_complete(c.request("s", "user text", json_mode=True))
    assert backend.calls[0].user_text == "user text"
    assert backend.calls[1].user_text.startswith("user text") and "JSON" in backend.calls[1].user_text


class Flaky:
    def __init__(self, failures, exc=TransportError):
        self.failures = failures
        self.exc = exc
        self.calls = 0

    def send(self, req):
        from chartdesc.providers import ChatResponse

        self.calls += 1
        if self.calls <= self.failures:
            raise self.exc("boom")
        return ChatResponse("fine")


def test_transport_retry_with_backoff():
    delays = []
    c = ChatClient(Flaky(2), "m", sleep=delays.append, backoff=0.5)
    assert c.chat_complete(c.request("s", "u")).text == "fine"
    assert len(delays) == 2
    assert 0.5 <= delays[0] <= 1.0 and 1.0 <= delays[1] <= 1.5


def test_transport_gives_up_after_three_attempts():
    backend = Flaky(5, RateLimitError)
    c = ChatClient(backend, "m", sleep=no_sleep)
    with pytest.raises(RateLimitError):
        c.chat_complete(c.request("s", "u"))
    assert backend.calls == 3


def test_non_retryable_provider_error():
    backend = Flaky(5, ProviderError)
    c = ChatClient(backend, "m", sleep=no_sleep)
    with pytest.raises(ProviderError):
        c.chat_complete(c.request("s", "u"))
    assert backend.calls == 1


def test_concurrency_limit_bounds_in_flight():
    state = {"now": 0, "peak": 0}
    lock = threading.Lock()
    gate = threading.Event()

    def reply(req):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        gate.wait(0.05)
        with lock:
            state["now"] -= 1
        return "x"

    c = ChatClient(MockChatBackend(reply), "m", limiter=threading.BoundedSemaphore(2))
    threads = [threading.Thread(target=c.chat_complete, args=(c.request("s", str(i)),)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert state["peak"] <= 2


def test_rules_file_backend(tmp_path):
    rules = tmp_path / "rules.jsonl"
    rules.write_text('{"match": "TASK: a", "reply": "A"}\n{"match": "", "reply": "default"}\n')
    backend = MockChatBackend.from_rules_file(rules)
    assert backend.send(ChatRequest("m", "TASK: a", "u")).text == "A"
    assert backend.send(ChatRequest("m", "TASK: b", "u")).text == "default"


def test_profile_factory(monkeypatch):
    c = chat_client_from_profile({"kind": "mock", "reply": "hi", "model_id": "fake"})
    assert c.model_id == "fake" and c.chat_complete(c.request("s", "u")).text == "hi"
    monkeypatch.delenv("NO_SUCH_KEY", raising=False)
    with pytest.raises(ProviderError):
        chat_client_from_profile({"kind": "openai", "base_url": "http://x", "api_key_env": "NO_SUCH_KEY"})
    with pytest.raises(ProviderError):
        chat_client_from_profile({"kind": "carrier-pigeon"})


@pytest.mark.parametrize(
    "text,expected",
    [
        ('{"a": 1}', {"a": 1}),
        ('```json\n{"a": 1}\n```', {"a": 1}),
        ('Here it is: {"a": [1, 2]} hope that helps', {"a": [1, 2]}),
        ("[1, 2]", [1, 2]),
    ],
)
def test_parse_json_text(text, expected):
    assert parse_json_text(text) == expected


def test_parse_json_text_rejects_prose():
    with pytest.raises(ValueError):
        parse_json_text("no json here")


# --- embeddings -------------------------------------------------------------------

def test_embed_cache_bit_identical(tmp_path):
    backend = MockEmbeddingBackend(dimension=16)
    c = EmbeddingClient(backend, "e", ResponseCache(tmp_path), sleep=no_sleep)
    (a,) = c.embed(["x"])
    (b,) = c.embed(["x"])
    assert a.values == b.values
    assert c.network_calls == 1
    cold = EmbeddingClient(MockEmbeddingBackend(dimension=16), "e", ResponseCache(tmp_path))
    (c2,) = cold.embed(["x"])
    assert c2.values == a.values and cold.network_calls == 0


def test_embed_batches_only_missing_texts():
    backend = MockEmbeddingBackend(dimension=8)
    c = EmbeddingClient(backend, "e")
    c.embed(["a", "b"])
    out = c.embed(["b", "c", "b"])
    assert backend.calls == [["a", "b"], ["c"]]
    assert len(out) == 3 and out[0] == out[2]


def test_embed_preconditions():
    c = EmbeddingClient(MockEmbeddingBackend(), "e")
    with pytest.raises(ValueError):
        c.embed([])
    with pytest.raises(ValueError):
        c.embed(["ok", ""])


def test_self_similarity_of_embeddings():
    c = EmbeddingClient(MockEmbeddingBackend(), "e")
    (v,) = c.embed(["trend of accuracy"])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-6)


def test_orthogonal_mock_tokens():
    c = EmbeddingClient(MockEmbeddingBackend({"up": [1, 0], "down": [0, 1]}), "e")
    up, down = c.embed(["up", "down"])
    assert cosine_similarity(up, down) == 0.0


def test_cosine_cases():
    v = EmbeddingVector((0.3, -1.2, 2.0))
    assert cosine_similarity(v, v) == pytest.approx(1.0)
    assert cosine_similarity(v, EmbeddingVector(tuple(-x for x in v.values))) == pytest.approx(-1.0)
    assert cosine_similarity(EmbeddingVector((1, 0)), EmbeddingVector((0, 1))) == 0.0
    w = EmbeddingVector((1.0, 2.0, 0.5))
    assert cosine_similarity(v, w) == cosine_similarity(w, v)


def test_cosine_errors():
    with pytest.raises(ValueError):
        cosine_similarity(EmbeddingVector((1, 0)), EmbeddingVector((1, 0, 0)))
    with pytest.raises(ValueError):
        cosine_similarity(EmbeddingVector((0, 0)), EmbeddingVector((1, 0)))


def test_embedding_vector_validation():
    with pytest.raises(ValueError):
        EmbeddingVector(())
    with pytest.raises(ValueError):
        EmbeddingVector((1.0, float("inf")))
    assert EmbeddingVector((1, 2, 3)).dimension == 3


# --- OpenAI-compatible wire format ----------------------------------------------------

def _backend(handler):
    http = httpx.Client(transport=httpx.MockTransport(handler))
    return OpenAICompatibleBackend("https://api.example.test/v1/", "k", client=http)


def test_openai_chat_body_with_image():
    seen = {}

    def handler(request):
        seen["url"] = str(request.url)
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"id": "r1", "choices": [{"message": {"content": "{}"}}]})

    img = png_bytes()
    resp = _backend(handler).send(ChatRequest("gpt-x", "sys", "describe", images=[("image/png", img)], response_format="json"))
    assert resp.text == "{}"
    body = seen["body"]
    assert seen["url"] == "https://api.example.test/v1/chat/completions"
    assert body["model"] == "gpt-x" and body["temperature"] == 0.0 and body["top_p"] == 1.0
    assert body["response_format"] == {"type": "json_object"}
    assert body["messages"][0] == {"role": "system", "content": "sys"}
    parts = body["messages"][1]["content"]
    assert parts[0] == {"type": "text", "text": "describe"}
    assert parts[1]["image_url"]["url"] == "data:image/png;base64," + base64.b64encode(img).decode()


def test_openai_status_mapping():
    for status, exc in ((429, RateLimitError), (503, TransportError), (400, ProviderError)):
        backend = _backend(lambda request, s=status: httpx.Response(s, text="nope"))
        with pytest.raises(exc):
            backend.send(ChatRequest("m", "", "u"))


def test_openai_embeddings_sorted_by_index():
    def handler(request):
        return httpx.Response(200, json={"data": [{"index": 1, "embedding": [0, 1]}, {"index": 0, "embedding": [1, 0]}]})

    assert _backend(handler).embed(["a", "b"], "emb") == [[1, 0], [0, 1]]


def test_openai_network_error_is_transport_error():
    def handler(request):
        raise httpx.ConnectError("refused")

    with pytest.raises(TransportError):
        _backend(handler).send(ChatRequest("m", "", "u"))
