"""Chat and embedding backends.

Two kinds of backend sit behind one interface:

* ``remote``: any chat-completions compatible HTTP endpoint.
* ``scripted``: deterministic fixtures, looked up by (tag, prompt hash), then
  by an ordered per-tag script, then by an optional responder callable.

Every call is recorded in a :class:`CallLog` so tests can assert call counts
and retry behaviour.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import httpx
import numpy as np

log = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
DEFAULT_KEY_ENV = "LIFESIM_API_KEY"
CORRECTIVE_INSTRUCTION = (
    "Your previous reply could not be parsed. Reply again and put the final "
    "answer in a single JSON block enclosed between ```json and ```."
)


class GatewayError(Exception):
    pass


class FixtureMiss(GatewayError):
    pass


class BackendExhausted(GatewayError):
    """Retry budget used up against a remote backend."""


class ParseError(GatewayError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class StructuredOutputError(ParseError):
    """No parseable structured value after the whole retry budget."""


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = 1.0
    max_tokens: int = 1024
    tag: str = "chat"
    # template bindings; used by scripted responders, never sent over the wire
    meta: dict = field(default_factory=dict, compare=False, hash=False)
    seed: int | None = None

    def __post_init__(self):
        msgs = tuple((str(r), str(t)) for r, t in self.messages)
        object.__setattr__(self, "messages", msgs)
        for role, _ in msgs:
            if role not in ROLES:
                raise ValueError(f"invalid role {role!r}")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @classmethod
    def single(cls, prompt: str, *, system: str | None = None, **kw) -> "ChatRequest":
        msgs = [("system", system)] if system else []
        msgs.append(("user", prompt))
        return cls(messages=tuple(msgs), **kw)

    def prompt_text(self) -> str:
        return "\n".join(f"<{role}>\n{text}" for role, text in self.messages)

    def prompt_hash(self) -> str:
        return hashlib.sha256(self.prompt_text().encode()).hexdigest()[:16]

    def with_correction(self, bad_reply: str) -> "ChatRequest":
        msgs = self.messages + (("assistant", bad_reply), ("user", CORRECTIVE_INSTRUCTION))
        return replace(self, messages=msgs)


@dataclass
class BackendSpec:
    kind: str = "scripted"
    name: str = ""
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = DEFAULT_KEY_ENV
    fixture: str | None = None
    responder: str | None = None
    rate_limit: float | None = None  # requests per second
    retry_budget: int = 3
    timeout: float = 60.0
    dim: int = 64
    embed_mode: str = "text"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("remote", "scripted"):
            raise ValueError(f"backend kind must be remote|scripted, got {self.kind!r}")
        if self.retry_budget < 0:
            raise ValueError("retry budget must be >= 0")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote backend needs an endpoint")
        if not self.name:
            self.name = self.model or self.responder or self.kind

    @classmethod
    def parse(cls, text: str) -> "BackendSpec":
        """Build a spec from a file path or a shorthand.

        Shorthands: ``scripted``, ``scripted:synthetic``, ``scripted:FIXTURE.jsonl``,
        ``remote:MODEL@URL``. A trailing ``#name`` sets the display name.
        """
        name = ""
        if "#" in text:
            text, name = text.split("#", 1)
        p = Path(text)
        if p.suffix in (".yaml", ".yml", ".json") and p.exists():
            import yaml

            data = yaml.safe_load(p.read_text()) or {}
            if name:
                data["name"] = name
            return cls(**data)
        kind, _, rest = text.partition(":")
        if kind == "scripted":
            if not rest:
                return cls(kind="scripted", name=name)
            if rest.endswith(".jsonl"):
                return cls(kind="scripted", fixture=rest, name=name)
            return cls(kind="scripted", responder=rest, name=name)
        if kind == "remote":
            model, _, url = rest.partition("@")
            return cls(kind="remote", model=model, endpoint=url, name=name)
        raise ValueError(f"cannot parse backend spec {text!r}")


@dataclass
class CallRecord:
    backend: str
    tag: str
    prompt_hash: str
    attempt: int
    status: str  # ok | retry | error
    latency_s: float
    prompt_tokens: int = 0
    completion_tokens: int = 0


class CallLog:
    def __init__(self):
        self._lock = threading.Lock()
        self.records: list[CallRecord] = []

    def add(self, rec: CallRecord):
        with self._lock:
            self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def by_tag(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in list(self.records):
            counts[r.tag] = counts.get(r.tag, 0) + 1
        return counts

    def tags(self) -> list[str]:
        return [r.tag for r in list(self.records)]

    def retries(self) -> int:
        return sum(r.status == "retry" for r in list(self.records))


class TokenBucket:
    """Blocking token bucket; one token per request."""

    def __init__(self, rate: float, capacity: float | None = None, clock=time.monotonic, sleep=time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else max(1.0, rate)
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self):
        with self._lock:
            while True:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
                self._last = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                self._sleep((1 - self._tokens) / self.rate)


def _approx_tokens(text: str) -> int:
    return len(text.split())


class ChatBackend:
    spec: BackendSpec

    def __init__(self, spec: BackendSpec, log: CallLog | None = None):
        self.spec = spec
        self.log = log if log is not None else CallLog()
        self._bucket = TokenBucket(spec.rate_limit) if spec.rate_limit else None

    @property
    def name(self) -> str:
        return self.spec.name

    def chat(self, request: ChatRequest) -> str:
        raise NotImplementedError


class ScriptedChat(ChatBackend):
    """Fixture-driven chat backend.

    Fixture records are ``{"tag", "match": "exact"|"ordered", "reply"}``; exact
    records also carry ``"hash"`` (the request prompt hash). Ordered replies
    for a tag are handed out in sequence and the last one repeats.
    """

    def __init__(
        self,
        records: Sequence[dict] = (),
        responder: Callable[[ChatRequest], str] | None = None,
        spec: BackendSpec | None = None,
        log: CallLog | None = None,
    ):
        super().__init__(spec or BackendSpec(kind="scripted"), log)
        self.responder = responder
        self._exact: dict[tuple[str, str], str] = {}
        self._ordered: dict[str, list[str]] = {}
        self._cursor: dict[str, int] = {}
        self._lock = threading.Lock()
        for rec in records:
            self.add(rec)

    def add(self, rec: dict):
        match = rec.get("match", "ordered")
        if match == "exact":
            self._exact[(rec["tag"], rec["hash"])] = rec["reply"]
        elif match == "ordered":
            self._ordered.setdefault(rec["tag"], []).append(rec["reply"])
        else:
            raise ValueError(f"unknown fixture match mode {match!r}")

    @classmethod
    def from_file(cls, path, responder=None, spec=None, log=None) -> "ScriptedChat":
        records = []
        for i, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{i}: bad fixture record: {e}") from None
        return cls(records, responder=responder, spec=spec, log=log)

    def _lookup(self, request: ChatRequest) -> str:
        h = request.prompt_hash()
        reply = self._exact.get((request.tag, h))
        if reply is not None:
            return reply
        script = self._ordered.get(request.tag)
        if script:
            with self._lock:
                i = self._cursor.get(request.tag, 0)
                self._cursor[request.tag] = i + 1
            return script[min(i, len(script) - 1)]
        if self.responder is not None:
            return self.responder(request)
        raise FixtureMiss(f"no fixture for tag={request.tag} hash={h}")

    def chat(self, request: ChatRequest) -> str:
        t0 = time.perf_counter()
        try:
            reply = self._lookup(request)
        except Exception:
            self.log.add(CallRecord(self.name, request.tag, request.prompt_hash(), 0, "error",
                                    time.perf_counter() - t0))
            raise
        self.log.add(CallRecord(self.name, request.tag, request.prompt_hash(), 0, "ok",
                                time.perf_counter() - t0,
                                _approx_tokens(request.prompt_text()), _approx_tokens(reply)))
        return reply


RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


class RemoteChat(ChatBackend):
    """Client for a chat-completions compatible endpoint.

    The API key is read from the environment variable named by ``api_key_env``.
    Transient failures (429, 5xx, transport errors) are retried with
    exponential backoff up to ``spec.retry_budget`` extra attempts.
    """

    def __init__(self, spec: BackendSpec, log: CallLog | None = None,
                 transport: httpx.BaseTransport | None = None,
                 backoff: float = 1.0, sleep=time.sleep):
        super().__init__(spec, log)
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(spec.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(base_url=spec.endpoint.rstrip("/"), headers=headers,
                                    timeout=spec.timeout, transport=transport)
        self.backoff = backoff
        self._sleep = sleep

    def payload(self, request: ChatRequest) -> dict:
        body: dict[str, Any] = {
            "model": self.spec.model,
            "messages": [{"role": r, "content": t} for r, t in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.seed is not None:
            body["seed"] = request.seed
        return body

    def chat(self, request: ChatRequest) -> str:
        body = self.payload(request)
        h = request.prompt_hash()
        last_err = ""
        for attempt in range(self.spec.retry_budget + 1):
            if self._bucket:
                self._bucket.acquire()
            t0 = time.perf_counter()
            try:
                resp = self._client.post("/chat/completions", json=body)
            except httpx.TransportError as e:
                resp, last_err = None, f"transport error: {e}"
            latency = time.perf_counter() - t0
            if resp is not None and resp.status_code == 200:
                data = resp.json()
                usage = data.get("usage") or {}
                self.log.add(CallRecord(self.name, request.tag, h, attempt, "ok", latency,
                                        usage.get("prompt_tokens", 0), usage.get("completion_tokens", 0)))
                return data["choices"][0]["message"]["content"] or ""
            if resp is not None:
                last_err = f"HTTP {resp.status_code}: {resp.text[:200]}"
                if resp.status_code not in RETRYABLE_STATUS:
                    self.log.add(CallRecord(self.name, request.tag, h, attempt, "error", latency))
                    raise GatewayError(f"{self.name} [{request.tag}] {last_err}")
            final = attempt == self.spec.retry_budget
            self.log.add(CallRecord(self.name, request.tag, h, attempt, "error" if final else "retry", latency))
            if not final:
                log.warning("%s [%s] attempt %d failed (%s); retrying", self.name, request.tag, attempt, last_err)
                self._sleep(self.backoff * 2 ** attempt)
        raise BackendExhausted(
            f"{self.name} [{request.tag}] retry budget {self.spec.retry_budget} exhausted: {last_err}")


# --- embeddings -------------------------------------------------------------

def l2_normalize(mat: np.ndarray) -> np.ndarray:
    mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero vector")
    return mat / norms


def _text_seed(text: str, seed: int) -> int:
    digest = hashlib.blake2b(text.encode(), digest_size=8, key=str(seed).encode()).digest()
    return int.from_bytes(digest, "little")


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class Embedder:
    dim: int

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        raise NotImplementedError

    def embed_one(self, text: str) -> np.ndarray:
        return self.embed([text])[0]


class ScriptedEmbedder(Embedder):
    """Deterministic hash-to-sphere embedder.

    ``mode="text"`` maps the whole string to one random point on the sphere, so
    only identical texts are similar. ``mode="tokens"`` sums per-token points,
    giving overlapping texts a positive cosine.
    """

    def __init__(self, dim: int = 64, seed: int = 0, mode: str = "text", log: CallLog | None = None):
        if mode not in ("text", "tokens"):
            raise ValueError(f"unknown embed mode {mode!r}")
        self.dim = dim
        self.seed = seed
        self.mode = mode
        self.log = log if log is not None else CallLog()
        self._cache: dict[str, np.ndarray] = {}

    def _point(self, text: str) -> np.ndarray:
        v = self._cache.get(text)
        if v is None:
            v = np.random.default_rng(_text_seed(text, self.seed)).standard_normal(self.dim)
            self._cache[text] = v
        return v

    def _vector(self, text: str) -> np.ndarray:
        if self.mode == "text":
            return self._point(text)
        tokens = _TOKEN_RE.findall(text.lower())
        if not tokens:
            return self._point(text)
        return np.sum([self._point("\x00tok:" + t) for t in tokens], axis=0)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        t0 = time.perf_counter()
        if not len(texts):
            return np.zeros((0, self.dim))
        out = l2_normalize(np.stack([self._vector(t) for t in texts]))
        self.log.add(CallRecord("scripted-embed", "embed", "", 0, "ok", time.perf_counter() - t0))
        return out


class RemoteEmbedder(Embedder):
    """Embeddings from an OpenAI-style ``/embeddings`` endpoint."""

    def __init__(self, spec: BackendSpec, log: CallLog | None = None,
                 transport: httpx.BaseTransport | None = None):
        self.spec = spec
        self.log = log if log is not None else CallLog()
        headers = {}
        key = os.environ.get(spec.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(base_url=spec.endpoint.rstrip("/"), headers=headers,
                                    timeout=spec.timeout, transport=transport)
        self.dim = 0

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not len(texts):
            return np.zeros((0, self.dim))
        t0 = time.perf_counter()
        resp = self._client.post("/embeddings", json={"model": self.spec.model, "input": list(texts)})
        if resp.status_code != 200:
            self.log.add(CallRecord(self.spec.name, "embed", "", 0, "error", time.perf_counter() - t0))
            raise GatewayError(f"embedding request failed: HTTP {resp.status_code}")
        rows = [d["embedding"] for d in sorted(resp.json()["data"], key=lambda d: d.get("index", 0))]
        dims = {len(r) for r in rows}
        if len(dims) != 1 or (self.dim and dims != {self.dim}):
            raise GatewayError(f"embedding dimension drift: {sorted(dims)} (expected {self.dim or 'any'})")
        self.dim = dims.pop()
        self.log.add(CallRecord(self.spec.name, "embed", "", 0, "ok", time.perf_counter() - t0))
        return l2_normalize(np.asarray(rows))


# --- structured output ------------------------------------------------------

_FENCE_RE = re.compile(r"```json[ \t]*\n?(.*?)```", re.DOTALL | re.IGNORECASE)


def extract_structured(reply: str) -> Any:
    """Parse the last ```json fenced block of a reply, or the whole reply."""
    blocks = _FENCE_RE.findall(reply or "")
    candidate = blocks[-1] if blocks else (reply or "")
    try:
        return json.loads(candidate.strip())
    except (json.JSONDecodeError, ValueError):
        where = "last fenced json block" if blocks else "reply"
        raise ParseError(f"could not parse {where} as JSON", raw=reply) from None


def ask_structured_reply(backend: ChatBackend, request: ChatRequest, retries: int | None = None) -> tuple[Any, str]:
    """Chat, then parse; on a parse failure re-ask with a corrective turn.

    Returns the parsed value and the reply it came from.
    """
    budget = backend.spec.retry_budget if retries is None else retries
    reply = ""
    for _ in range(budget + 1):
        reply = backend.chat(request)
        try:
            return extract_structured(reply), reply
        except ParseError:
            request = request.with_correction(reply)
    raise StructuredOutputError(
        f"[{request.tag}] no parseable structured output after {budget} retries", raw=reply)


def ask_structured(backend: ChatBackend, request: ChatRequest, retries: int | None = None) -> Any:
    return ask_structured_reply(backend, request, retries)[0]


def rationale(reply: str) -> str:
    """Free text preceding the last fenced json block."""
    idx = (reply or "").lower().rfind("```json")
    return (reply[:idx] if idx >= 0 else "").strip()


def as_bool(value: Any) -> bool:
    """Read the "true"/"false" strings the prompts ask for."""
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)) and value in (0, 1):
        return bool(value)
    if isinstance(value, str) and value.strip().lower() in ("true", "false"):
        return value.strip().lower() == "true"
    raise ValueError(f"not a boolean: {value!r}")


# --- factories --------------------------------------------------------------

def make_chat(spec: BackendSpec, log: CallLog | None = None) -> ChatBackend:
    if spec.kind == "remote":
        return RemoteChat(spec, log)
    responder = None
    if spec.responder:
        from .synthetic import get_responder

        responder = get_responder(spec.responder, seed=spec.seed)
    if spec.fixture:
        return ScriptedChat.from_file(spec.fixture, responder=responder, spec=spec, log=log)
    return ScriptedChat((), responder=responder, spec=spec, log=log)


def make_embedder(spec: BackendSpec, log: CallLog | None = None) -> Embedder:
    if spec.kind == "remote":
        return RemoteEmbedder(spec, log)
    return ScriptedEmbedder(dim=spec.dim, seed=spec.seed, mode=spec.embed_mode, log=log)
