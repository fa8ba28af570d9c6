"""Chat-model access in live, record and replay modes.

Live mode speaks the OpenAI-compatible ``/chat/completions`` protocol. Record
mode does the same and appends every exchange to a JSONL cassette; replay mode
answers from the cassette only and never touches the network.
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
from typing import Any, Callable, Protocol, Sequence

import httpx

log = logging.getLogger(__name__)

API_BASE_ENV = "MACOMM_API_BASE"
API_KEY_ENV = "MACOMM_API_KEY"
MODES = ("live", "record", "replay")


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.7
    seed: int = 42
    max_tokens: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    system_prompt: str
    messages: tuple[tuple[str, str], ...]
    params: GenerationParams = field(default_factory=GenerationParams)

    def __post_init__(self) -> None:
        msgs = tuple((str(r), str(t)) for r, t in self.messages)
        object.__setattr__(self, "messages", msgs)
        if not msgs:
            raise ValueError("request needs at least one message")
        for role, _ in msgs:
            if role not in ("user", "assistant"):
                raise ValueError(f"bad message role {role!r}")
        if msgs[-1][0] != "user":
            raise ValueError("last message must come from the user")

    @property
    def user_prompt(self) -> str:
        return self.messages[-1][1]

    def snapshot(self) -> dict[str, Any]:
        return {
            "model_id": self.model_id,
            "system_prompt": self.system_prompt,
            "messages": [list(m) for m in self.messages],
            "temperature": self.params.temperature,
            "seed": self.params.seed,
            "max_tokens": self.params.max_tokens,
        }

    @classmethod
    def from_snapshot(cls, d: dict[str, Any]) -> "ChatRequest":
        return cls(
            d["model_id"],
            d["system_prompt"],
            tuple(tuple(m) for m in d["messages"]),
            GenerationParams(d["temperature"], d["seed"], d.get("max_tokens")),
        )


@dataclass(frozen=True)
class ChatResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency: float = 0.0


def fingerprint(request: ChatRequest) -> str:
    """Stable digest over model, system prompt, ordered messages, temperature and seed."""
    payload = json.dumps(
        [
            request.model_id,
            request.system_prompt,
            [list(m) for m in request.messages],
            float(request.params.temperature),
            int(request.params.seed),
        ],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class UnrecordedRequestError(LookupError):
    def __init__(self, key: str):
        super().__init__(f"unrecorded request {key}")
        self.fingerprint = key


class BackendError(RuntimeError):
    """Provider or transport failure after retries."""


class TransientError(BackendError):
    """A failure worth retrying (timeouts, 429, 5xx)."""


Transport = Callable[[ChatRequest], ChatResponse]


class ChatModel(Protocol):
    def complete(self, request: ChatRequest) -> ChatResponse: ...


class OpenAICompatTransport:
    """Minimal client for an OpenAI-compatible chat-completions endpoint."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        timeout: float = 600.0,
        client: httpx.Client | None = None,
    ):
        base_url = base_url or os.environ.get(API_BASE_ENV)
        if not base_url:
            raise BackendError(f"live mode needs {API_BASE_ENV} or an explicit base_url")
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self._client = client or httpx.Client(timeout=timeout)

    def __call__(self, request: ChatRequest) -> ChatResponse:
        body: dict[str, Any] = {
            "model": request.model_id,
            "messages": [{"role": "system", "content": request.system_prompt}]
            + [{"role": r, "content": t} for r, t in request.messages],
            "temperature": request.params.temperature,
            "seed": request.params.seed,
        }
        if request.params.max_tokens is not None:
            body["max_tokens"] = request.params.max_tokens
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        start = time.monotonic()
        try:
            resp = self._client.post(f"{self.base_url}/chat/completions", json=body, headers=headers)
        except httpx.TransportError as exc:
            raise TransientError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            raise BackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        data = resp.json()
        usage = data.get("usage") or {}
        text = data["choices"][0]["message"].get("content") or ""
        return ChatResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            latency=time.monotonic() - start,
        )


class Cassette:
    """Append-only JSONL store of (fingerprint, request snapshot, response)."""

    def __init__(self, path: str | os.PathLike[str]):
        self.path = Path(path)
        self._index: dict[str, ChatResponse] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    rec = json.loads(line)
                    r = rec["response"]
                    # first record wins so replays match the earliest recording
                    self._index.setdefault(
                        rec["fingerprint"],
                        ChatResponse(r["text"], r.get("prompt_tokens", 0), r.get("completion_tokens", 0), 0.0),
                    )

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def lookup(self, key: str) -> ChatResponse | None:
        return self._index.get(key)

    def append(self, request: ChatRequest, response: ChatResponse) -> str:
        key = fingerprint(request)
        rec = {
            "fingerprint": key,
            "request": request.snapshot(),
            "response": {
                "text": response.text,
                "prompt_tokens": response.prompt_tokens,
                "completion_tokens": response.completion_tokens,
            },
        }
        line = json.dumps(rec, ensure_ascii=False, sort_keys=True)
        with self._lock:
            if key in self._index:
                return key
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8", newline="\n") as fh:
                fh.write(line + "\n")
            self._index[key] = ChatResponse(response.text, response.prompt_tokens, response.completion_tokens, 0.0)
        return key


class ChatBackend:
    """Uniform ``complete`` over live, record and replay modes.

    Transient transport failures are retried up to ``max_retries`` times with
    exponential backoff; this is unrelated to content-level retries.
    """

    def __init__(
        self,
        mode: str = "replay",
        cassette: str | os.PathLike[str] | Cassette | None = None,
        transport: Transport | None = None,
        max_retries: int = 3,
        backoff: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if mode in ("record", "replay") and cassette is None:
            raise ValueError(f"{mode} mode needs a cassette")
        self.mode = mode
        self.cassette = cassette if isinstance(cassette, Cassette) or cassette is None else Cassette(cassette)
        self._transport = transport
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        self._lock = threading.Lock()
        self.calls = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0

    @property
    def transport(self) -> Transport:
        if self._transport is None:
            self._transport = OpenAICompatTransport()
        return self._transport

    def complete(self, request: ChatRequest) -> ChatResponse:
        if self.mode == "replay":
            key = fingerprint(request)
            hit = self.cassette.lookup(key)
            if hit is None:
                raise UnrecordedRequestError(key)
            resp = hit
        else:
            resp = self._call_live(request)
            if self.mode == "record":
                self.cassette.append(request, resp)
        with self._lock:
            self.calls += 1
            self.prompt_tokens += resp.prompt_tokens
            self.completion_tokens += resp.completion_tokens
        return resp

    def _call_live(self, request: ChatRequest) -> ChatResponse:
        attempt = 0
        while True:
            try:
                return self.transport(request)
            except TransientError as exc:
                if attempt >= self.max_retries:
                    raise BackendError(f"giving up after {attempt + 1} attempts: {exc}") from exc
                delay = self.backoff * (2**attempt)
                log.warning("transient backend failure (%s); retrying in %.2fs", exc, delay)
                self._sleep(delay)
                attempt += 1


def make_request(
    model_id: str,
    system_prompt: str,
    user_prompt: str,
    temperature: float,
    seed: int,
    history: Sequence[tuple[str, str]] = (),
    max_tokens: int | None = None,
) -> ChatRequest:
    return ChatRequest(
        model_id,
        system_prompt,
        tuple(history) + (("user", user_prompt),),
        GenerationParams(temperature, seed, max_tokens),
    )
