"""Chat-completions client with a record/replay cassette.

The client speaks the OpenAI-compatible wire protocol served by vLLM,
llama.cpp and similar servers.  In ``replay`` mode every response comes
from the cassette and the network is never touched; any drift in prompt,
model or decoding parameters changes the request hash and fails loudly.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import httpx

from .errors import BackendError, ConfigError, FixtureError, TransportError

MODES = ("live", "record", "replay")
CHAT_PATH = "/v1/chat/completions"
TOKENIZE_PATH = "/tokenize"


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://localhost:8000"
    model: str = ""
    timeout_ms: int = 60_000
    auth_env: str | None = "PIPESTAGES_API_KEY"
    mode: str = "live"
    cassette: str | None = None

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ConfigError("endpoint timeout must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"endpoint mode must be one of {MODES}, got {self.mode!r}")
        if self.mode in ("record", "replay") and not self.cassette:
            raise ConfigError(f"{self.mode} mode needs a cassette path")
        if self.mode == "replay" and not Path(self.cassette).is_file():
            raise ConfigError(f"replay cassette {self.cassette} does not exist")


@dataclass(frozen=True)
class Decoding:
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 16
    logprobs: bool = True

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
            "logprobs": self.logprobs,
        }


@dataclass(frozen=True)
class InferenceResponse:
    text: str
    logprobs: tuple[float, ...] | None
    # milliseconds relative to the start of the request
    first_token_ms: float
    last_token_ms: float
    prompt_tokens: int | None = None
    completion_tokens: int | None = None
    finish_reason: str | None = None
    timing_source: str = "client"
    request_hash: str = ""

    def __post_init__(self):
        if self.last_token_ms < self.first_token_ms:
            raise BackendError("last-token timestamp precedes first-token timestamp")

    @property
    def duration_ms(self) -> float:
        return self.last_token_ms - self.first_token_ms


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def chat_body(prompt: str, model: str, decoding: Decoding) -> dict:
    return {
        "model": model,
        "messages": [{"role": "user", "content": prompt}],
        **decoding.to_dict(),
    }


def request_hash(prompt: str, model: str, decoding: Decoding) -> str:
    """Hash of everything that can change a completion."""
    return _sha256(_canonical({"path": CHAT_PATH, **chat_body(prompt, model, decoding)}))


def tokenize_hash(text: str, model: str) -> str:
    return _sha256(_canonical({"path": TOKENIZE_PATH, "model": model, "prompt": text}))


def heuristic_token_count(text: str) -> int:
    """Word and punctuation pieces; used when the server has no tokenizer route."""
    return len(re.findall(r"\w+|[^\w\s]", text))


class Cassette:
    """Append-only JSON-lines store of request hash -> response.

    Each record keeps the request hash, a digest of the prompt and the raw
    response body, so fixtures stay reviewable.  Appends are serialised by
    a lock; lookups only read the in-memory index.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[str, dict] = {}
        if self.path.is_file():
            for lineno, line in enumerate(self.path.read_text(encoding="utf-8").splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    self._records[record["request_hash"]] = record
                except (json.JSONDecodeError, KeyError) as exc:
                    raise ConfigError(f"{self.path}:{lineno}: bad cassette record: {exc}") from exc

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, key: str) -> bool:
        return key in self._records

    def get(self, key: str) -> dict:
        try:
            return self._records[key]
        except KeyError:
            raise FixtureError(key) from None

    def append(self, record: dict) -> None:
        line = _canonical(record)
        with self._lock:
            self._records[record["request_hash"]] = record
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")


def parse_chat_response(body: dict, wall_ms: float, rhash: str = "") -> InferenceResponse:
    try:
        choice = body["choices"][0]
        text = choice["message"]["content"] or ""
    except (KeyError, IndexError, TypeError) as exc:
        raise BackendError(f"malformed chat-completions response: {exc}") from exc
    logprobs = None
    lp = choice.get("logprobs")
    if isinstance(lp, dict) and lp.get("content"):
        logprobs = tuple(float(t["logprob"]) for t in lp["content"])
    usage = body.get("usage") or {}
    timings = body.get("timings")
    if isinstance(timings, dict) and "predicted_ms" in timings:
        # llama.cpp-style server timings: prompt processing, then generation
        first = float(timings.get("prompt_ms", 0.0))
        last = first + float(timings["predicted_ms"])
        source = "server"
    else:
        first, last, source = 0.0, wall_ms, "client"
    return InferenceResponse(
        text=text,
        logprobs=logprobs,
        first_token_ms=first,
        last_token_ms=last,
        prompt_tokens=usage.get("prompt_tokens"),
        completion_tokens=usage.get("completion_tokens"),
        finish_reason=choice.get("finish_reason"),
        timing_source=source,
        request_hash=rhash,
    )


class InferenceClient:
    """One endpoint configuration; safe to share between worker threads."""

    def __init__(
        self,
        cfg: EndpointConfig,
        *,
        transport: httpx.BaseTransport | None = None,
        clock: Callable[[], float] = time.perf_counter,
    ):
        self.cfg = cfg
        self._transport = transport
        self._clock = clock
        self._http: httpx.Client | None = None
        self._http_lock = threading.Lock()
        self.cassette = Cassette(cfg.cassette) if cfg.cassette else None

    def _client(self) -> httpx.Client:
        with self._http_lock:
            if self._http is None:
                headers = {}
                token = os.environ.get(self.cfg.auth_env) if self.cfg.auth_env else None
                if token:
                    headers["Authorization"] = f"Bearer {token}"
                self._http = httpx.Client(
                    base_url=self.cfg.base_url,
                    timeout=self.cfg.timeout_ms / 1000.0,
                    headers=headers,
                    transport=self._transport,
                )
            return self._http

    def close(self) -> None:
        if self._http is not None:
            self._http.close()
            self._http = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _post(self, path: str, body: dict) -> tuple[dict, float]:
        start = self._clock()
        try:
            resp = self._client().post(path, json=body)
        except httpx.HTTPError as exc:
            raise TransportError(f"{path}: {type(exc).__name__}: {exc}") from exc
        wall_ms = (self._clock() - start) * 1000.0
        if resp.status_code >= 400:
            raise TransportError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}", resp.status_code)
        try:
            return resp.json(), wall_ms
        except ValueError as exc:
            raise BackendError(f"{path}: response is not JSON") from exc

    def complete(self, prompt: str, decoding: Decoding) -> InferenceResponse:
        if not prompt:
            raise ConfigError("prompt must be non-empty")
        rhash = request_hash(prompt, self.cfg.model, decoding)
        if self.cfg.mode == "replay":
            record = self.cassette.get(rhash)
            timing = record["timing"]
            resp = parse_chat_response(record["response"], timing["last_token_ms"], rhash)
            if resp.timing_source == "client":
                resp = replace(resp, first_token_ms=timing["first_token_ms"])
            return resp

        body, wall_ms = self._post(CHAT_PATH, chat_body(prompt, self.cfg.model, decoding))
        resp = parse_chat_response(body, wall_ms, rhash)
        if self.cfg.mode == "record":
            self.cassette.append(
                {
                    "kind": "chat",
                    "request_hash": rhash,
                    "prompt_sha256": _sha256(prompt),
                    "model": self.cfg.model,
                    "decoding": decoding.to_dict(),
                    "response": body,
                    "timing": {
                        "first_token_ms": resp.first_token_ms,
                        "last_token_ms": resp.last_token_ms,
                        "source": resp.timing_source,
                    },
                }
            )
        return resp

    def count_tokens(self, text: str) -> int:
        """Token count from the server's tokenizer route.

        Falls back to :func:`heuristic_token_count` when the server does not
        expose one; the result is cassette-backed like completions.
        """
        thash = tokenize_hash(text, self.cfg.model)
        if self.cfg.mode == "replay":
            return int(self.cassette.get(thash)["response"]["count"])
        source = "server"
        try:
            body, _ = self._post(TOKENIZE_PATH, {"model": self.cfg.model, "prompt": text})
            count = int(body["count"] if "count" in body else len(body["tokens"]))
        except (TransportError, BackendError, KeyError, TypeError):
            count, source = heuristic_token_count(text), "heuristic"
        if self.cfg.mode == "record":
            self.cassette.append(
                {
                    "kind": "tokenize",
                    "request_hash": thash,
                    "prompt_sha256": _sha256(text),
                    "model": self.cfg.model,
                    "response": {"count": count, "source": source},
                }
            )
        return count
