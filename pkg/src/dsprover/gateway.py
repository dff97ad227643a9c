"""Chat-completion clients, output filtering and the replay store.

Every model call in the workflow goes through :class:`ModelGateway`, which
resolves a model id to a :class:`ModelEndpoint` and dispatches to a backend:

* :class:`HttpChatBackend` talks to any OpenAI-compatible ``/chat/completions`` URL.
* :class:`ReplayBackend` answers from a recorded :class:`ReplayStore` (offline runs).
* :class:`RecordingBackend` wraps another backend and appends every exchange to a store.
* :class:`ScriptedBackend` calls a Python function; used to build fixtures.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Protocol, Sequence

import httpx

from dsprover.core import SamplingParams, canonical_json
from dsprover.errors import EndpointUnavailable, ProtocolError, ReplayMiss

log = logging.getLogger(__name__)

Message = dict[str, str]

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
RETRYABLE_STATUS = frozenset({408, 409, 429, 500, 502, 503, 504})


@dataclass(frozen=True)
class ModelEndpoint:
    model_id: str
    base_url: str = "http://localhost:8000/v1"
    api_key_env: Optional[str] = None
    sampling_defaults: SamplingParams = field(default_factory=SamplingParams)
    request_timeout: float = 600.0
    max_retries: int = 3
    served_name: str = ""
    thinking_markers: tuple[str, str] = (THINK_OPEN, THINK_CLOSE)
    logprobs: bool = False

    def __post_init__(self) -> None:
        url = httpx.URL(self.base_url)
        if url.scheme not in ("http", "https") or not url.host:
            raise ValueError(f"malformed base_url for {self.model_id}: {self.base_url!r}")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        object.__setattr__(self, "thinking_markers", tuple(self.thinking_markers))

    @property
    def wire_model(self) -> str:
        return self.served_name or self.model_id

    @classmethod
    def from_dict(cls, model_id: str, d: dict[str, Any]) -> "ModelEndpoint":
        return cls(
            model_id=model_id,
            base_url=d.get("base_url", "http://localhost:8000/v1"),
            api_key_env=d.get("api_key_env"),
            sampling_defaults=SamplingParams.from_dict(d.get("sampling", {})),
            request_timeout=float(d.get("request_timeout", 600.0)),
            max_retries=int(d.get("max_retries", 3)),
            served_name=d.get("served_name", d.get("model", "")),
            thinking_markers=tuple(d.get("thinking_markers", (THINK_OPEN, THINK_CLOSE))),
            logprobs=bool(d.get("logprobs", False)),
        )


@dataclass(frozen=True)
class Completion:
    """One sampled choice. ``text`` is the raw content, thinking included."""

    text: str
    completion_tokens: int = 0
    thinking_tokens: int = 0
    logprob: Optional[float] = None

    @property
    def answer_tokens(self) -> int:
        return max(self.completion_tokens - self.thinking_tokens, 0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "completion_tokens": self.completion_tokens,
            "thinking_tokens": self.thinking_tokens,
            "logprob": self.logprob,
        }


def request_payload(model_id: str, messages: Sequence[Message], sampling: SamplingParams) -> dict:
    return {
        "model": model_id,
        "messages": [{"role": m["role"], "content": m["content"]} for m in messages],
        "sampling": sampling.to_dict(),
    }


def fingerprint(model_id: str, messages: Sequence[Message], sampling: SamplingParams) -> str:
    payload = canonical_json(request_payload(model_id, messages, sampling))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def strip_thinking(raw: str, markers: tuple[str, str] = (THINK_OPEN, THINK_CLOSE)) -> str:
    """Remove thinking regions from a completion.

    Regions run from the leftmost open marker to the first close marker after
    it (no nesting). An unclosed open marker swallows the rest of the text. A
    close marker with no open marker before it ends a region that started at
    the beginning of the text, which is what servers that inject the open
    marker into the prompt produce.
    """
    open_m, close_m = markers
    text = raw
    while True:
        i = text.find(open_m)
        j = text.find(close_m)
        if j != -1 and (i == -1 or j < i):
            text = text[j + len(close_m):]
            continue
        if i == -1:
            break
        j = text.find(close_m, i + len(open_m))
        if j == -1:
            text = text[:i]
            break
        text = text[:i] + text[j + len(close_m):]
    return text.lstrip()


def thinking_share(raw: str, markers: tuple[str, str] = (THINK_OPEN, THINK_CLOSE)) -> float:
    """Fraction of characters of ``raw`` that fall inside thinking regions."""
    if not raw:
        return 0.0
    kept = strip_thinking(raw, markers)
    removed = len(raw) - len(kept) - (len(raw) - len(raw.lstrip()) if not kept else 0)
    return min(max(removed / len(raw), 0.0), 1.0)


def split_counts(total: int, weights: Sequence[float]) -> list[int]:
    """Split an integer total proportionally (largest remainder)."""
    if not weights:
        return []
    s = sum(weights)
    if s <= 0:
        weights = [1.0] * len(weights)
        s = float(len(weights))
    raw = [total * w / s for w in weights]
    out = [int(r) for r in raw]
    rest = total - sum(out)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - out[i]), i))
    for i in order[:rest]:
        out[i] += 1
    return out


class ChatBackend(Protocol):
    def complete(
        self, endpoint: ModelEndpoint, messages: Sequence[Message], sampling: SamplingParams
    ) -> list[Completion]: ...


class HttpChatBackend:
    """OpenAI-compatible chat-completions client with retry and backoff."""

    def __init__(
        self,
        client: Optional[httpx.Client] = None,
        *,
        backoff_base: float = 1.0,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self._client = client or httpx.Client()
        self._backoff_base = backoff_base
        self._sleep = sleep

    def close(self) -> None:
        self._client.close()

    def _body(self, endpoint: ModelEndpoint, messages, sampling: SamplingParams) -> dict:
        body: dict[str, Any] = {
            "model": endpoint.wire_model,
            "messages": [{"role": m["role"], "content": m["content"]} for m in messages],
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "max_tokens": sampling.max_tokens,
            "n": sampling.n,
        }
        if sampling.seed is not None:
            body["seed"] = sampling.seed
        if endpoint.logprobs:
            body["logprobs"] = True
        return body

    def complete(self, endpoint, messages, sampling):
        if not messages:
            raise ValueError("messages must be non-empty")
        headers = {"Content-Type": "application/json"}
        if endpoint.api_key_env:
            key = os.environ.get(endpoint.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        url = endpoint.base_url.rstrip("/") + "/chat/completions"
        body = self._body(endpoint, messages, sampling)
        last: Exception | None = None
        for attempt in range(endpoint.max_retries + 1):
            if attempt:
                self._sleep(self._backoff_base * 2 ** (attempt - 1))
            try:
                resp = self._client.post(
                    url, json=body, headers=headers, timeout=endpoint.request_timeout
                )
            except httpx.TransportError as exc:
                last = exc
                log.warning("%s: transport error %s (attempt %d)", endpoint.model_id, exc, attempt + 1)
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last = EndpointUnavailable(f"HTTP {resp.status_code}")
                log.warning("%s: HTTP %d (attempt %d)", endpoint.model_id, resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise ProtocolError(f"{endpoint.model_id}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                payload = resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{endpoint.model_id}: response is not JSON") from exc
            return parse_chat_response(payload, endpoint)
        raise EndpointUnavailable(
            f"{endpoint.model_id}: unavailable after {endpoint.max_retries + 1} tries: {last}"
        )


def parse_chat_response(payload: Any, endpoint: ModelEndpoint) -> list[Completion]:
    """Turn an OpenAI-shaped response body into :class:`Completion` objects."""
    try:
        choices = payload["choices"]
        texts: list[str] = []
        token_logprobs: list[Optional[list[float]]] = []
        for ch in choices:
            msg = ch["message"]
            content = msg.get("content") or ""
            if not isinstance(content, str):
                raise TypeError("content is not a string")
            reasoning = msg.get("reasoning_content")
            if reasoning:
                open_m, close_m = endpoint.thinking_markers
                content = f"{open_m}{reasoning}{close_m}{content}"
            texts.append(content)
            lp = ch.get("logprobs") or {}
            items = lp.get("content") if isinstance(lp, dict) else None
            token_logprobs.append([float(t["logprob"]) for t in items] if items else None)
        usage = payload.get("usage") or {}
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"{endpoint.model_id}: malformed chat response: {exc}") from exc
    if not texts:
        raise ProtocolError(f"{endpoint.model_id}: response has no choices")

    if all(t is not None for t in token_logprobs):
        per_choice = [len(t) for t in token_logprobs]  # type: ignore[arg-type]
    else:
        per_choice = split_counts(int(usage.get("completion_tokens", 0)), [len(t) or 1 for t in texts])
    details = usage.get("completion_tokens_details") or {}
    shares = [thinking_share(t, endpoint.thinking_markers) for t in texts]
    if details.get("reasoning_tokens") is not None:
        thinking = split_counts(int(details["reasoning_tokens"]), [s * n for s, n in zip(shares, per_choice)])
    else:
        thinking = [round(s * n) for s, n in zip(shares, per_choice)]
    out = []
    for text, n, th, lps in zip(texts, per_choice, thinking, token_logprobs):
        out.append(Completion(text, n, min(th, n), sum(lps) if lps is not None else None))
    return out


class ReplayStore:
    """Append-only JSONL file of recorded exchanges, keyed by request fingerprint.

    Record shape: ``{fingerprint, request, responses, token_counts, logprobs}``.
    Reads are lock-free lookups into an in-memory index; appends hold a lock.
    """

    def __init__(self, path: Optional[Path | str] = None) -> None:
        self.path = Path(path) if path is not None else None
        self._index: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open(encoding="utf-8") as f:
                for lineno, line in enumerate(f, 1):
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        log.warning("%s:%d: skipping torn replay record", self.path, lineno)
                        continue
                    self._index.setdefault(rec["fingerprint"], rec)

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, fp: str) -> bool:
        return fp in self._index

    def get(self, fp: str) -> Optional[list[Completion]]:
        rec = self._index.get(fp)
        if rec is None:
            return None
        lps = rec.get("logprobs") or [None] * len(rec["responses"])
        return [
            Completion(text, tc["completion"], tc["thinking"], lp)
            for text, tc, lp in zip(rec["responses"], rec["token_counts"], lps)
        ]

    def append(self, fp: str, request: dict, completions: Sequence[Completion]) -> None:
        rec = {
            "fingerprint": fp,
            "request": request,
            "responses": [c.text for c in completions],
            "token_counts": [
                {"completion": c.completion_tokens, "thinking": c.thinking_tokens} for c in completions
            ],
            "logprobs": [c.logprob for c in completions],
        }
        with self._lock:
            if fp in self._index:
                return
            self._index[fp] = rec
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as f:
                    f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")
                    f.flush()
                    os.fsync(f.fileno())


class ReplayBackend:
    def __init__(self, store: ReplayStore) -> None:
        self.store = store

    def complete(self, endpoint, messages, sampling):
        if not messages:
            raise ValueError("messages must be non-empty")
        fp = fingerprint(endpoint.model_id, messages, sampling)
        got = self.store.get(fp)
        if got is None:
            raise ReplayMiss(f"{endpoint.model_id}: no recorded response for request {fp[:12]}")
        return got


class RecordingBackend:
    def __init__(self, inner: ChatBackend, store: ReplayStore) -> None:
        self.inner = inner
        self.store = store

    def complete(self, endpoint, messages, sampling):
        fp = fingerprint(endpoint.model_id, messages, sampling)
        got = self.store.get(fp)
        if got is not None:
            return got
        out = self.inner.complete(endpoint, messages, sampling)
        self.store.append(fp, request_payload(endpoint.model_id, messages, sampling), out)
        return out


ScriptFn = Callable[[ModelEndpoint, Sequence[Message], SamplingParams], Iterable["Completion | str"]]


class ScriptedBackend:
    """Backend driven by a Python callable; plain strings become completions."""

    def __init__(self, fn: ScriptFn) -> None:
        self.fn = fn

    def complete(self, endpoint, messages, sampling):
        if not messages:
            raise ValueError("messages must be non-empty")
        out = []
        for item in self.fn(endpoint, messages, sampling):
            if isinstance(item, str):
                n = max(len(item.split()), 1)
                th = round(thinking_share(item, endpoint.thinking_markers) * n)
                item = Completion(item, n, th)
            out.append(item)
        return out


class ModelGateway:
    """Resolves model ids to endpoints and shares deterministic results.

    Results are memoised by request fingerprint only when the request is
    reproducible (explicit seed or zero temperature), so independent live
    samples are never conflated.
    """

    def __init__(self, endpoints: dict[str, ModelEndpoint], backend: ChatBackend, *, share: bool = True) -> None:
        self.endpoints = dict(endpoints)
        self.backend = backend
        self.share = share
        self._cache: dict[str, list[Completion]] = {}
        self._lock = threading.Lock()
        self.calls = 0
        self.cache_hits = 0

    def endpoint(self, model_id: str) -> ModelEndpoint:
        try:
            return self.endpoints[model_id]
        except KeyError:
            raise EndpointUnavailable(f"no endpoint configured for model {model_id!r}") from None

    def complete(
        self, model_id: str, messages: Sequence[Message], sampling: Optional[SamplingParams] = None
    ) -> list[Completion]:
        ep = self.endpoint(model_id)
        sampling = sampling or ep.sampling_defaults
        deterministic = sampling.seed is not None or sampling.temperature == 0
        fp = fingerprint(model_id, messages, sampling) if self.share and deterministic else None
        if fp is not None:
            with self._lock:
                hit = self._cache.get(fp)
                if hit is not None:
                    self.cache_hits += 1
                    return list(hit)
        out = self.backend.complete(ep, messages, sampling)
        with self._lock:
            self.calls += 1
            if fp is not None:
                self._cache.setdefault(fp, list(out))
        return out
