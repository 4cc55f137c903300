"""Chat-completion gateway with a live HTTP backend and a scripted replay backend.

Every model call in the pipeline goes through :class:`Gateway.complete`.  The
replay backend serves recorded responses per role slot so a whole run can be
reproduced offline.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol

import httpx

from .errors import (
    InvalidRequest,
    ParseError,
    ProviderError,
    ReplayMismatch,
    ScriptExhausted,
)

logger = logging.getLogger(__name__)

ROLES = ("system", "user", "assistant")
ROLE_SLOTS = ("manager", "webagent", "brainstorm", "scriptgen")

MAX_ATTEMPTS = 4
BACKOFF_BASE = 0.5
DEFAULT_MAX_IN_FLIGHT = 4
RETRY_STATUSES = frozenset({429, 500, 502, 503, 504})


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise InvalidRequest(f"unknown message role {self.role!r}")
        if self.role in ("system", "user") and not self.content:
            raise InvalidRequest(f"{self.role} message content must be non-empty")

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}


@dataclass
class LLMRequest:
    role_slot: str
    messages: list[ChatMessage]
    max_tokens: int = 2048
    temperature: float = 0.0

    def validate(self) -> None:
        if self.role_slot not in ROLE_SLOTS:
            raise InvalidRequest(f"unknown role_slot {self.role_slot!r}")
        if not self.messages:
            raise InvalidRequest("messages must be non-empty")
        if self.max_tokens <= 0:
            raise InvalidRequest("max_tokens must be positive")
        if self.temperature < 0:
            raise InvalidRequest("temperature must be non-negative")


@dataclass
class LLMResponse:
    content: str
    model_id: str
    attempt_count: int = 1
    usage: Optional[dict] = None


def prompt_digest(messages: Iterable[ChatMessage]) -> str:
    """Digest of the prompt text: lowercased, whitespace-collapsed, SHA-256, first 16 hex."""
    text = "\n".join(m.content for m in messages)
    norm = re.sub(r"\s+", " ", text.lower()).strip()
    return hashlib.sha256(norm.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class ReplayEntry:
    role_slot: str
    response: str
    prompt_digest: Optional[str] = None


@dataclass
class ReplayScript:
    entries: list[ReplayEntry] = field(default_factory=list)

    def __post_init__(self):
        self._queues: dict[str, list[ReplayEntry]] = defaultdict(list)
        for e in self.entries:
            self._queues[e.role_slot].append(e)
        self.cursors: dict[str, int] = {slot: 0 for slot in ROLE_SLOTS}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.entries)

    def remaining(self, role_slot: str) -> int:
        return len(self._queues[role_slot]) - self.cursors[role_slot]

    def take(self, role_slot: str, digest: Optional[str] = None) -> ReplayEntry:
        with self._lock:
            queue = self._queues[role_slot]
            pos = self.cursors[role_slot]
            if pos >= len(queue):
                raise ScriptExhausted(role_slot, pos)
            entry = queue[pos]
            if entry.prompt_digest and digest is not None and entry.prompt_digest != digest:
                raise ReplayMismatch(
                    f"{role_slot} entry {pos}: expected prompt digest {entry.prompt_digest}, got {digest}"
                )
            self.cursors[role_slot] = pos + 1
            return entry

    def reset(self) -> None:
        with self._lock:
            self.cursors = {slot: 0 for slot in ROLE_SLOTS}


def parse_replay(text: str) -> ReplayScript:
    entries = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict):
            raise ParseError("record must be an object", lineno)
        slot = obj.get("role_slot")
        if slot not in ROLE_SLOTS:
            raise ParseError(f"missing or unknown role_slot {slot!r}", lineno)
        response = obj.get("response")
        if not isinstance(response, str):
            raise ParseError("missing response field", lineno)
        digest = obj.get("prompt_digest")
        if digest is not None and not isinstance(digest, str):
            raise ParseError("prompt_digest must be a string", lineno)
        entries.append(ReplayEntry(slot, response, digest or None))
    return ReplayScript(entries)


def load_replay(source: str | os.PathLike) -> ReplayScript:
    """Load a line-delimited replay file.  OSError propagates for unreadable paths."""
    return parse_replay(Path(source).read_text(encoding="utf-8"))


def dump_replay(entries: Iterable[ReplayEntry]) -> str:
    lines = []
    for e in entries:
        rec = {"role_slot": e.role_slot}
        if e.prompt_digest:
            rec["prompt_digest"] = e.prompt_digest
        rec["response"] = e.response
        lines.append(json.dumps(rec, ensure_ascii=False))
    return "".join(line + "\n" for line in lines)


class Backend(Protocol):
    def complete(self, request: LLMRequest, model_id: str) -> LLMResponse: ...


class ReplayBackend:
    def __init__(self, script: ReplayScript, check_digests: bool = True):
        self.script = script
        self.check_digests = check_digests

    def complete(self, request: LLMRequest, model_id: str) -> LLMResponse:
        digest = prompt_digest(request.messages) if self.check_digests else None
        entry = self.script.take(request.role_slot, digest)
        return LLMResponse(content=entry.response, model_id=model_id, attempt_count=1)


@dataclass
class Endpoint:
    url: str
    key: Optional[str] = None


def endpoint_from_env(role_slot: str, environ: Optional[dict] = None) -> Optional[Endpoint]:
    """Resolve ALITA_PROVIDER_URL_<SLOT> / ALITA_PROVIDER_KEY_<SLOT>, falling back to the unsuffixed pair."""
    env = os.environ if environ is None else environ
    suffix = role_slot.upper()
    url = env.get(f"ALITA_PROVIDER_URL_{suffix}") or env.get("ALITA_PROVIDER_URL")
    if not url:
        return None
    key = env.get(f"ALITA_PROVIDER_KEY_{suffix}") or env.get("ALITA_PROVIDER_KEY")
    return Endpoint(url=url, key=key)


class HttpBackend:
    """OpenAI-compatible chat-completions client with retry and an in-flight cap.

    Transient failures (429, 5xx, timeouts, connection errors) are retried up
    to ``max_attempts`` times with full-jitter exponential backoff.
    """

    def __init__(
        self,
        endpoints: dict[str, Endpoint],
        *,
        max_attempts: int = MAX_ATTEMPTS,
        backoff_base: float = BACKOFF_BASE,
        timeout: float = 120.0,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        sleep: Callable[[float], None] = time.sleep,
        rng: Optional[random.Random] = None,
        client: Optional[httpx.Client] = None,
    ):
        self.endpoints = endpoints
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self.sleep = sleep
        self.rng = rng or random.Random()
        self._client = client or httpx.Client(timeout=timeout)
        self._gate = threading.BoundedSemaphore(max_in_flight)

    @classmethod
    def from_env(cls, **kwargs) -> "HttpBackend":
        endpoints = {}
        for slot in ROLE_SLOTS:
            ep = endpoint_from_env(slot)
            if ep is not None:
                endpoints[slot] = ep
        return cls(endpoints, **kwargs)

    def backoff(self, attempt: int) -> float:
        return self.rng.uniform(0, self.backoff_base * 2 ** attempt)

    def complete(self, request: LLMRequest, model_id: str) -> LLMResponse:
        ep = self.endpoints.get(request.role_slot)
        if ep is None:
            raise ProviderError(f"no provider endpoint configured for role_slot {request.role_slot!r}")
        headers = {"Content-Type": "application/json"}
        if ep.key:
            headers["Authorization"] = f"Bearer {ep.key}"
        body = {
            "model": model_id,
            "messages": [m.to_dict() for m in request.messages],
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        last_error = "unknown error"
        for attempt in range(self.max_attempts):
            if attempt:
                self.sleep(self.backoff(attempt - 1))
            try:
                with self._gate:
                    resp = self._client.post(ep.url, json=body, headers=headers)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                logger.warning("provider call failed (attempt %d): %s", attempt + 1, last_error)
                continue
            if resp.status_code in RETRY_STATUSES:
                last_error = f"HTTP {resp.status_code}"
                logger.warning("provider returned %s (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise ProviderError(f"HTTP {resp.status_code}: {resp.text[:200]}", attempts=attempt + 1)
            try:
                data = resp.json()
                content = data["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ProviderError(f"malformed provider response: {exc}", attempts=attempt + 1) from None
            return LLMResponse(
                content=content or "",
                model_id=data.get("model", model_id),
                attempt_count=attempt + 1,
                usage=data.get("usage"),
            )
        raise ProviderError(f"retry budget exhausted: {last_error}", attempts=self.max_attempts)


class RecordingBackend:
    """Wraps another backend and keeps every exchange as a replay entry."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.entries: list[ReplayEntry] = []
        self._lock = threading.Lock()

    def complete(self, request: LLMRequest, model_id: str) -> LLMResponse:
        resp = self.inner.complete(request, model_id)
        with self._lock:
            self.entries.append(ReplayEntry(request.role_slot, resp.content, prompt_digest(request.messages)))
        return resp

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(dump_replay(self.entries), encoding="utf-8")


class Gateway:
    """Validates requests, resolves the model id for the role slot and delegates to a backend."""

    def __init__(self, backend: Backend, model_ids: Optional[dict[str, str]] = None):
        self.backend = backend
        self.model_ids = {slot: f"replay-{slot}" for slot in ROLE_SLOTS}
        if model_ids:
            self.model_ids.update(model_ids)

    def complete(self, request: LLMRequest) -> LLMResponse:
        request.validate()
        return self.backend.complete(request, self.model_ids[request.role_slot])

    def chat(self, role_slot: str, messages: list[ChatMessage], **kwargs) -> LLMResponse:
        return self.complete(LLMRequest(role_slot=role_slot, messages=list(messages), **kwargs))
