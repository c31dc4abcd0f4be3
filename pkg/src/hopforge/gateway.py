"""Chat-completion gateway with HTTP, fixture-replay and in-process backends.

This is the only module that talks to the network.  Every call is logged in
memory (and optionally to a JSONL request log); fixtures are keyed by a
SHA-256 digest of the canonical JSON of the request messages.
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
from typing import Any, Callable, Literal, Optional

import httpx
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
TRANSIENT_STATUS = {408, 409, 425, 429, 500, 502, 503, 504}


class GatewayError(RuntimeError):
    pass


class TransientGatewayError(GatewayError):
    """A failure worth retrying (timeouts, 429, 5xx)."""


class FixtureMissingError(GatewayError):
    def __init__(self, digest: str) -> None:
        super().__init__(f"no fixture for prompt hash {digest}")
        self.digest = digest


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[tuple[str, str], ...]
    temperature: float = 0.5
    top_p: float = 0.9
    max_tokens: int = 8192
    # distinguishes repeated samples of one prompt; part of the fixture key
    sample_index: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("request needs at least one message")
        for role, content in self.messages:
            if role not in ROLES:
                raise ValueError(f"unknown role {role!r}")
            if not isinstance(content, str):
                raise TypeError("message content must be text")
        if not 0 <= self.temperature <= 2:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p {self.top_p} outside (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")

    @classmethod
    def user(cls, prompt: str, **params: Any) -> "ChatRequest":
        return cls((("user", prompt),), **params)

    def message_dicts(self) -> list[dict[str, str]]:
        return [{"role": r, "content": c} for r, c in self.messages]

    def params(self) -> dict[str, Any]:
        return {"temperature": self.temperature, "top_p": self.top_p, "max_tokens": self.max_tokens}


def prompt_hash(req: ChatRequest) -> str:
    payload: Any = req.message_dicts()
    if req.sample_index is not None:
        payload = {"messages": payload, "sample": req.sample_index}
    canonical = json.dumps(payload, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class GatewayConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backend: Literal["http", "stub", "synthetic"] = "stub"
    endpoint: Optional[str] = None
    model: str = "gpt-4o"
    auth_env: str = "OPENAI_API_KEY"
    max_attempts: int = Field(4, ge=1)
    backoff_s: float = Field(1.0, ge=0)
    backoff_max_s: float = Field(30.0, ge=0)
    timeout_s: float = Field(120.0, gt=0)
    concurrency: int = Field(8, ge=1)
    fixture_file: Optional[str] = "fixtures.jsonl"
    record_to: Optional[str] = None
    request_log: Optional[str] = None
    temperature: float = Field(0.5, ge=0, le=2)
    top_p: float = Field(0.9, gt=0, le=1)
    max_tokens: int = Field(8192, ge=1)

    @model_validator(mode="after")
    def _backend_requirements(self) -> "GatewayConfig":
        if self.backend == "http" and not self.endpoint:
            raise ValueError("http backend requires endpoint")
        if self.backend == "stub" and not self.fixture_file:
            raise ValueError("stub backend requires fixture_file")
        return self


# ------------------------------------------------------------------ backends


class HttpBackend:
    """POSTs the chat-completion JSON shape and retries transient failures."""

    def __init__(
        self,
        cfg: GatewayConfig,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if not cfg.endpoint:
            raise ValueError("http backend requires endpoint")
        self.cfg = cfg
        self.client = client or httpx.Client(timeout=cfg.timeout_s)
        self.sleep = sleep
        self.attempt_log: list[dict[str, Any]] = []

    def _headers(self) -> dict[str, str]:
        token = os.environ.get(self.cfg.auth_env)
        return {"Authorization": f"Bearer {token}"} if token else {}

    def _once(self, body: dict[str, Any]) -> str:
        try:
            resp = self.client.post(self.cfg.endpoint, json=body, headers=self._headers())
        except httpx.TransportError as exc:
            raise TransientGatewayError(f"transport error: {exc}") from exc
        if resp.status_code in TRANSIENT_STATUS:
            raise TransientGatewayError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"malformed completion payload: {exc}") from exc

    def __call__(self, req: ChatRequest) -> str:
        body = {"model": self.cfg.model, "messages": req.message_dicts(), **req.params()}
        if req.sample_index is not None:
            body["seed"] = req.sample_index
        last: Exception | None = None
        for attempt in range(1, self.cfg.max_attempts + 1):
            try:
                text = self._once(body)
            except TransientGatewayError as exc:
                self.attempt_log.append({"attempt": attempt, "error": str(exc)})
                last = exc
                if attempt < self.cfg.max_attempts:
                    delay = min(self.cfg.backoff_s * 2 ** (attempt - 1), self.cfg.backoff_max_s)
                    logger.warning("attempt %d failed (%s); retrying in %.1fs", attempt, exc, delay)
                    self.sleep(delay)
                continue
            self.attempt_log.append({"attempt": attempt, "error": None})
            return text
        raise GatewayError(f"exhausted {self.cfg.max_attempts} attempts: {last}")


def read_fixtures(path: str | Path) -> dict[str, str]:
    fixtures: dict[str, str] = {}
    path = Path(path)
    if not path.exists():
        return fixtures
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                fixtures[row["hash"]] = row["completion"]
    return fixtures


class StubBackend:
    """Replays completions recorded in a fixture file."""

    def __init__(self, fixtures: dict[str, str] | str | Path) -> None:
        self.fixtures = fixtures if isinstance(fixtures, dict) else read_fixtures(fixtures)

    def __call__(self, req: ChatRequest) -> str:
        digest = prompt_hash(req)
        try:
            return self.fixtures[digest]
        except KeyError:
            raise FixtureMissingError(digest) from None


_fixture_lock = threading.Lock()


def record_fixture(path: str | Path, req: ChatRequest, completion: str) -> dict[str, str]:
    """Append a replayable ``{hash, completion}`` entry to a fixture file."""
    entry = {"hash": prompt_hash(req), "completion": completion}
    with _fixture_lock, Path(path).open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
    return entry


# ------------------------------------------------------------------- gateway


@dataclass
class CallRecord:
    hash: str
    messages: list[dict[str, str]]
    params: dict[str, Any]
    completion: str | None
    latency_ms: float
    error: str | None = None

    def to_json(self) -> dict[str, Any]:
        row = {
            "hash": self.hash,
            "messages": self.messages,
            "params": self.params,
            "completion": self.completion,
            "latency_ms": round(self.latency_ms, 3),
        }
        if self.error:
            row["error"] = self.error
        return row


@dataclass
class Gateway:
    """Thread-safe front end over one backend callable.

    ``backend`` is any ``ChatRequest -> str`` callable.  At most
    ``concurrency`` requests are in flight at once.
    """

    backend: Callable[[ChatRequest], str]
    concurrency: int = 8
    record_to: str | Path | None = None
    request_log: str | Path | None = None
    defaults: dict[str, Any] = field(default_factory=dict)
    calls: list[CallRecord] = field(default_factory=list, init=False)

    def __post_init__(self) -> None:
        self._sem = threading.BoundedSemaphore(self.concurrency)
        self._lock = threading.Lock()

    @classmethod
    def from_config(cls, cfg: GatewayConfig, base_dir: str | Path = ".") -> "Gateway":
        base = Path(base_dir)

        def resolve(p: str | None) -> Path | None:
            return None if p is None else base / p

        if cfg.backend == "http":
            backend: Callable[[ChatRequest], str] = HttpBackend(cfg)
        elif cfg.backend == "stub":
            path = resolve(cfg.fixture_file)
            if path is None or not path.exists():
                raise GatewayError(f"fixture file not found: {path}")
            backend = StubBackend(path)
        else:
            from .synthetic import SyntheticResponder

            backend = SyntheticResponder()
        return cls(
            backend,
            concurrency=cfg.concurrency,
            record_to=resolve(cfg.record_to),
            request_log=resolve(cfg.request_log),
            defaults={"temperature": cfg.temperature, "top_p": cfg.top_p, "max_tokens": cfg.max_tokens},
        )

    def request(self, prompt: str, **params: Any) -> ChatRequest:
        return ChatRequest.user(prompt, **{**self.defaults, **params})

    def complete(self, prompt: str, **params: Any) -> str:
        return self.chat(self.request(prompt, **params))

    def chat(self, req: ChatRequest) -> str:
        digest = prompt_hash(req)
        start = time.perf_counter()
        completion: str | None = None
        error: str | None = None
        try:
            with self._sem:
                completion = self.backend(req)
            return completion
        except GatewayError as exc:
            error = str(exc)
            raise
        finally:
            record = CallRecord(
                digest,
                req.message_dicts(),
                {**req.params(), "sample_index": req.sample_index},
                completion,
                (time.perf_counter() - start) * 1000,
                error,
            )
            with self._lock:
                self.calls.append(record)
                if self.request_log is not None:
                    with Path(self.request_log).open("a", encoding="utf-8") as fh:
                        fh.write(json.dumps(record.to_json(), ensure_ascii=False) + "\n")
            if completion is not None and self.record_to is not None:
                record_fixture(self.record_to, req, completion)


def chat(gateway: Gateway, req: ChatRequest) -> str:
    return gateway.chat(req)
