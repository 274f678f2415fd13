"""Chat-completion and embedding clients with on-disk caching and retries.

Backends only move bytes; ``ChatClient`` and ``EmbeddingClient`` own caching,
retry policy, JSON-mode validation and the in-flight request limit.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import os
import random
import re
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence, Union

import httpx
import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_CONCURRENCY = 4


class ProviderError(RuntimeError):
    """Terminal provider failure."""


class TransportError(ProviderError):
    """Network-level failure; retried with backoff."""


class RateLimitError(TransportError):
    pass


class MalformedJSONError(ProviderError):
    def __init__(self, raw_text: str, attempts: int):
        super().__init__(f"response was not valid JSON after {attempts} attempts")
        self.raw_text = raw_text
        self.attempts = attempts


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    system_prompt: str
    user_text: str
    images: tuple = ()  # ((mime_type, bytes), ...)
    response_format: str = "text"  # "text" or "json"
    temperature: float = 0.0
    top_p: float = 1.0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.response_format not in ("text", "json"):
            raise ValueError(f"unknown response_format {self.response_format!r}")
        object.__setattr__(self, "images", tuple((str(m), bytes(b)) for m, b in self.images))

    def payload(self) -> dict:
        """Provider-neutral request body; images travel as base64."""
        return {
            "model_id": self.model_id,
            "system_prompt": self.system_prompt,
            "user_text": self.user_text,
            "images": [
                {"mime_type": mime, "data": base64.b64encode(data).decode("ascii")}
                for mime, data in self.images
            ],
            "response_format": self.response_format,
            "temperature": self.temperature,
            "top_p": self.top_p,
        }

    def cache_key(self) -> str:
        blob = json.dumps(self.payload(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class ChatResponse:
    text: str
    provider_meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple

    def __post_init__(self) -> None:
        values = tuple(float(v) for v in self.values)
        if not values:
            raise ValueError("embedding must have positive dimension")
        if not all(np.isfinite(values)):
            raise ValueError("embedding has non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def dimension(self) -> int:
        return len(self.values)


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dimension != b.dimension:
        raise ValueError(f"dimension mismatch: {a.dimension} vs {b.dimension}")
    va = np.asarray(a.values)
    vb = np.asarray(b.values)
    na = np.linalg.norm(va)
    nb = np.linalg.norm(vb)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


_FENCE = re.compile(r"^```(?:json)?\s*(.*?)\s*```$", re.DOTALL)


def parse_json_text(text: str) -> Any:
    """Parse a model reply as JSON, tolerating code fences and chatter around one object."""
    text = (text or "").strip()
    fenced = _FENCE.match(text)
    if fenced:
        text = fenced.group(1)
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    for open_, close in (("{", "}"), ("[", "]")):
        start, end = text.find(open_), text.rfind(close)
        if start != -1 and end > start:
            try:
                return json.loads(text[start : end + 1])
            except json.JSONDecodeError:
                continue
    raise ValueError("no JSON value found in response")


class ResponseCache:
    """One file per request hash plus a ``.meta.json`` sidecar."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        return self.directory / key

    def get(self, key: str) -> Optional[bytes]:
        path = self._path(key)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            return None

    def put(self, key: str, data: bytes, model_id: str) -> None:
        meta = json.dumps({"timestamp": time.time(), "model_id": model_id}).encode("utf-8")
        # data file last: a present data file implies a complete entry
        self._atomic_write(self._path(key + ".meta.json"), meta)
        self._atomic_write(self._path(key), data)

    def _atomic_write(self, path: Path, data: bytes) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def _with_retries(call: Callable[[], Any], attempts: int, backoff: float, sleep: Callable[[float], None]):
    for attempt in range(attempts):
        try:
            return call()
        except TransportError as exc:
            if attempt == attempts - 1:
                raise
            delay = backoff * (2**attempt) + random.uniform(0, backoff)
            logger.warning("provider call failed (%s); retry %d in %.2fs", exc, attempt + 1, delay)
            sleep(delay)


class ChatClient:
    """Cached, retrying front end over a chat backend.

    ``backend`` is anything with ``send(ChatRequest) -> ChatResponse``.
    """

    def __init__(
        self,
        backend,
        model_id: str,
        cache: Optional[ResponseCache] = None,
        *,
        max_attempts: int = 3,
        json_retries: int = 2,
        backoff: float = 1.0,
        limiter: Optional[threading.Semaphore] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.model_id = model_id
        self.cache = cache
        self.max_attempts = max_attempts
        self.json_retries = json_retries
        self.backoff = backoff
        self.limiter = limiter or threading.BoundedSemaphore(DEFAULT_CONCURRENCY)
        self.sleep = sleep
        self.network_calls = 0
        self.cache_hits = 0
        self._lock = threading.Lock()

    def request(
        self,
        system_prompt: str,
        user_text: str,
        images: Sequence = (),
        json_mode: bool = False,
    ) -> ChatRequest:
        return ChatRequest(
            model_id=self.model_id,
            system_prompt=system_prompt,
            user_text=user_text,
            images=tuple(images),
            response_format="json" if json_mode else "text",
        )

    def _send(self, req: ChatRequest) -> ChatResponse:
        def once():
            with self.limiter:
                with self._lock:
                    self.network_calls += 1
                resp = self.backend.send(req)
            if not resp.text or not resp.text.strip():
                raise TransportError("empty response text")
            return resp

        return _with_retries(once, self.max_attempts, self.backoff, self.sleep)

    def chat_complete(self, req: ChatRequest) -> ChatResponse:
        key = req.cache_key()
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                with self._lock:
                    self.cache_hits += 1
                return ChatResponse(hit.decode("utf-8"), {"cached": True, "json_retries": 0})

        resp = self._send(req)
        retries = 0
        if req.response_format == "json":
            nudged = ChatRequest(
                model_id=req.model_id,
                system_prompt=req.system_prompt,
                user_text=req.user_text + "\n\nReturn only valid JSON, with no surrounding prose.",
                images=req.images,
                response_format="json",
                temperature=req.temperature,
                top_p=req.top_p,
            )
            while True:
                try:
                    parse_json_text(resp.text)
                    break
                except ValueError:
                    if retries >= self.json_retries:
                        raise MalformedJSONError(resp.text, retries + 1) from None
                    retries += 1
                    logger.warning("non-JSON reply from %s; retry %d", req.model_id, retries)
                    resp = self._send(nudged)

        meta = dict(resp.provider_meta)
        meta.update({"cached": False, "json_retries": retries})
        if self.cache is not None:
            self.cache.put(key, resp.text.encode("utf-8"), req.model_id)
        return ChatResponse(resp.text, meta)

    def complete_json(self, req: ChatRequest) -> tuple[Any, ChatResponse]:
        resp = self.chat_complete(req)
        return parse_json_text(resp.text), resp


class EmbeddingClient:
    """Embeds texts one cache entry per text; backend has ``embed(texts, model_id)``."""

    def __init__(
        self,
        backend,
        model_id: str,
        cache: Optional[ResponseCache] = None,
        *,
        max_attempts: int = 3,
        backoff: float = 1.0,
        limiter: Optional[threading.Semaphore] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.model_id = model_id
        self.cache = cache
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.limiter = limiter or threading.BoundedSemaphore(DEFAULT_CONCURRENCY)
        self.sleep = sleep
        self.network_calls = 0
        self._memo: dict[str, EmbeddingVector] = {}
        self._lock = threading.Lock()

    def _key(self, text: str) -> str:
        return hashlib.sha256(f"embed\0{self.model_id}\0{text}".encode("utf-8")).hexdigest()

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        if not texts:
            raise ValueError("embed() needs at least one text")
        if any(not isinstance(t, str) or not t for t in texts):
            raise ValueError("embed() texts must be non-empty strings")
        found: dict[str, EmbeddingVector] = {}
        missing: list[str] = []
        for text in dict.fromkeys(texts):
            key = self._key(text)
            with self._lock:
                vec = self._memo.get(key)
            if vec is None and self.cache is not None:
                raw = self.cache.get(key)
                if raw is not None:
                    vec = EmbeddingVector(tuple(json.loads(raw)))
            if vec is None:
                missing.append(text)
            else:
                found[text] = vec

        if missing:
            def once():
                with self.limiter:
                    with self._lock:
                        self.network_calls += 1
                    return self.backend.embed(missing, self.model_id)

            rows = _with_retries(once, self.max_attempts, self.backoff, self.sleep)
            if len(rows) != len(missing):
                raise ProviderError(f"expected {len(missing)} embeddings, got {len(rows)}")
            for text, row in zip(missing, rows):
                vec = EmbeddingVector(tuple(row))
                found[text] = vec
                if self.cache is not None:
                    self.cache.put(self._key(text), json.dumps(list(vec.values)).encode("utf-8"), self.model_id)

        with self._lock:
            for text, vec in found.items():
                self._memo[self._key(text)] = vec
        out = [found[t] for t in texts]
        if len({v.dimension for v in out}) != 1:
            raise ProviderError("embedding dimensions differ within one batch")
        return out


class OpenAICompatibleBackend:
    """Speaks the ``/chat/completions`` and ``/embeddings`` wire format."""

    def __init__(self, base_url: str, api_key: Optional[str] = None, timeout: float = 120.0, client: Optional[httpx.Client] = None):
        self.base_url = base_url.rstrip("/")
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self.client = client or httpx.Client(timeout=timeout, headers=headers)

    def _post(self, path: str, body: dict) -> dict:
        try:
            r = self.client.post(f"{self.base_url}{path}", json=body)
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        if r.status_code == 429:
            raise RateLimitError("rate limited (HTTP 429)")
        if r.status_code >= 500:
            raise TransportError(f"server error HTTP {r.status_code}")
        if r.status_code >= 400:
            raise ProviderError(f"HTTP {r.status_code}: {r.text[:500]}")
        return r.json()

    @staticmethod
    def chat_body(req: ChatRequest) -> dict:
        messages: list[dict] = []
        if req.system_prompt:
            messages.append({"role": "system", "content": req.system_prompt})
        if req.images:
            content: Any = [{"type": "text", "text": req.user_text}]
            for mime, data in req.images:
                url = f"data:{mime};base64,{base64.b64encode(data).decode('ascii')}"
                content.append({"type": "image_url", "image_url": {"url": url}})
        else:
            content = req.user_text
        messages.append({"role": "user", "content": content})
        body = {
            "model": req.model_id,
            "messages": messages,
            "temperature": req.temperature,
            "top_p": req.top_p,
        }
        if req.response_format == "json":
            body["response_format"] = {"type": "json_object"}
        return body

    def send(self, req: ChatRequest) -> ChatResponse:
        data = self._post("/chat/completions", self.chat_body(req))
        try:
            text = data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ProviderError(f"unexpected response shape: {str(data)[:300]}") from exc
        return ChatResponse(text, {"id": data.get("id"), "usage": data.get("usage")})

    def embed(self, texts: Sequence[str], model_id: str) -> list[list[float]]:
        data = self._post("/embeddings", {"model": model_id, "input": list(texts)})
        rows = sorted(data["data"], key=lambda d: d.get("index", 0))
        return [row["embedding"] for row in rows]


class MockChatBackend:
    """Scripted backend for tests and offline runs.

    ``replies`` is either one string (returned forever), a list consumed in
    order (the last entry repeats), or a callable ``(ChatRequest) -> str``.
    Every request is recorded in ``calls``.
    """

    def __init__(self, replies: Union[str, Sequence[str], Callable[[ChatRequest], str]]):
        self.replies = replies
        self.calls: list[ChatRequest] = []
        self._lock = threading.Lock()

    def send(self, req: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls.append(req)
            n = len(self.calls)
        if callable(self.replies):
            text = self.replies(req)
        elif isinstance(self.replies, str):
            text = self.replies
        else:
            text = self.replies[min(n - 1, len(self.replies) - 1)]
        return ChatResponse(text, {"mock": True})

    @classmethod
    def from_rules_file(cls, path: Union[str, Path]) -> "MockChatBackend":
        """Rules are JSONL ``{"match": substring, "reply": text}``; first match wins."""
        rules = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                rule = json.loads(line)
                rules.append((rule.get("match", ""), rule["reply"]))

        def respond(req: ChatRequest) -> str:
            haystack = req.system_prompt + "\n" + req.user_text
            for needle, reply in rules:
                if needle in haystack:
                    return reply
            raise ProviderError("no mock rule matches the request")

        return cls(respond)


class MockEmbeddingBackend:
    """Known texts map to fixed vectors; anything else gets a hashed bag-of-words vector."""

    def __init__(self, vectors: Optional[Mapping[str, Sequence[float]]] = None, dimension: int = 64):
        self.vectors = {k: list(map(float, v)) for k, v in (vectors or {}).items()}
        if self.vectors:
            dimension = len(next(iter(self.vectors.values())))
        self.dimension = dimension
        self.calls: list[list[str]] = []

    def _hashed(self, text: str) -> list[float]:
        vec = np.zeros(self.dimension)
        for word in re.findall(r"\w+", text.lower()) or [text]:
            digest = hashlib.sha256(word.encode("utf-8")).digest()
            vec[int.from_bytes(digest[:4], "big") % self.dimension] += 1.0
        return vec.tolist()

    def embed(self, texts: Sequence[str], model_id: str) -> list[list[float]]:
        self.calls.append(list(texts))
        return [self.vectors.get(t, None) or self._hashed(t) for t in texts]


def _profile_backend(profile: Mapping[str, Any], for_embeddings: bool):
    kind = profile.get("kind", "openai")
    if kind == "mock":
        if for_embeddings:
            return MockEmbeddingBackend(profile.get("vectors"), int(profile.get("dimension", 64)))
        if profile.get("replies_file"):
            return MockChatBackend.from_rules_file(profile["replies_file"])
        return MockChatBackend(profile.get("reply", "{}"))
    if kind == "openai":
        env = profile.get("api_key_env")
        key = os.environ.get(env) if env else None
        if env and not key:
            raise ProviderError(f"environment variable {env} is not set")
        return OpenAICompatibleBackend(profile["base_url"], key, float(profile.get("timeout", 120)))
    raise ProviderError(f"unknown provider kind {kind!r}")


def chat_client_from_profile(
    profile: Mapping[str, Any],
    cache: Optional[ResponseCache] = None,
    limiter: Optional[threading.Semaphore] = None,
) -> ChatClient:
    return ChatClient(
        _profile_backend(profile, for_embeddings=False),
        profile.get("model_id", "mock"),
        cache,
        max_attempts=int(profile.get("max_attempts", 3)),
        json_retries=int(profile.get("json_retries", 2)),
        limiter=limiter,
    )


def embedding_client_from_profile(
    profile: Mapping[str, Any],
    cache: Optional[ResponseCache] = None,
    limiter: Optional[threading.Semaphore] = None,
) -> EmbeddingClient:
    return EmbeddingClient(
        _profile_backend(profile, for_embeddings=True),
        profile.get("model_id", "mock-embed"),
        cache,
        max_attempts=int(profile.get("max_attempts", 3)),
        limiter=limiter,
    )
