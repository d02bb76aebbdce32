"""Completion backends: chat-completions HTTP, fixed echo, and record/replay."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import httpx

from .dockerfile import DockerfileSyntaxError, parse
from .prompting import AssembledPrompt

log = logging.getLogger(__name__)

BACKOFF_S = (1.0, 2.0, 4.0)


class TransportError(RuntimeError):
    pass


class BackendError(RuntimeError):
    def __init__(self, status: int, body: str):
        super().__init__(f"backend returned HTTP {status}: {body}")
        self.status = status
        self.body = body


class ReplayMiss(KeyError):
    pass


class ExtractionError(ValueError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o"
    temperature: float = 0.0
    timeout_s: float = 120.0
    max_retries: int = 3
    auth: str = "OPENAI_API_KEY"  # name of the environment variable holding the token
    max_concurrency: int = 4

    def __post_init__(self):
        if self.temperature != 0:
            raise ValueError("temperature is pinned to 0 for deterministic output")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")


@dataclass(frozen=True)
class CompletionExchange:
    prompt_hash: str
    response_text: str
    model: str
    latency_ms: int

    def to_json(self) -> dict:
        return {
            "prompt_hash": self.prompt_hash,
            "response_text": self.response_text,
            "model": self.model,
            "latency_ms": self.latency_ms,
        }


def prompt_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class Backend(Protocol):
    def send(self, prompt: AssembledPrompt, config: BackendConfig) -> str: ...


class EchoBackend:
    """Returns a fixed response, or ``respond(prompt_text)`` when given a callable."""

    def __init__(self, response: str | Callable[[str], str]):
        self.response = response

    def send(self, prompt: AssembledPrompt, config: BackendConfig) -> str:
        if callable(self.response):
            return self.response(prompt.text)
        return self.response


class HttpBackend:
    """Chat-completions style JSON API."""

    def __init__(self, transport: httpx.BaseTransport | None = None):
        self._transport = transport

    def send(self, prompt: AssembledPrompt, config: BackendConfig) -> str:
        messages = []
        if prompt.system:
            messages.append({"role": "system", "content": prompt.system})
        messages.append({"role": "user", "content": prompt.text})
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(config.auth) if config.auth else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body = {"model": config.model, "temperature": config.temperature, "messages": messages}
        try:
            with httpx.Client(transport=self._transport, timeout=config.timeout_s) as client:
                resp = client.post(config.endpoint, json=body, headers=headers)
        except httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code >= 400:
            raise BackendError(resp.status_code, resp.text)
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendError(resp.status_code, f"unexpected response body: {resp.text[:500]}") from exc


class ReplayStore:
    """JSON Lines file of recorded exchanges, keyed by prompt hash."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, CompletionExchange] = {}
        if self.path.exists():
            for line in self.path.read_text("utf-8").splitlines():
                if line.strip():
                    data = json.loads(line)
                    self._entries[data["prompt_hash"]] = CompletionExchange(**data)

    def lookup(self, key: str) -> CompletionExchange:
        with self._lock:
            try:
                return self._entries[key]
            except KeyError:
                raise ReplayMiss(key) from None

    def record(self, exchange: CompletionExchange) -> None:
        with self._lock:
            self._entries[exchange.prompt_hash] = exchange
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(exchange.to_json(), sort_keys=True) + "\n")

    def __contains__(self, key: str) -> bool:
        with self._lock:
            return key in self._entries

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


class CompletionClient:
    """Sends prompts to a backend, or answers them from a replay store.

    With ``replay`` set, the backend is never contacted and unseen prompts
    raise :class:`ReplayMiss`. With ``record`` set, every live exchange is
    appended to that store.
    """

    def __init__(self, config: BackendConfig, backend: Backend | None = None, *,
                 replay: ReplayStore | None = None, record: ReplayStore | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.backend = backend or HttpBackend()
        self.replay = replay
        self.recorder = record
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(config.max_concurrency)

    def complete(self, prompt: AssembledPrompt) -> str:
        key = prompt_hash(prompt.text)
        if self.replay is not None:
            return self.replay.lookup(key).response_text
        with self._slots:
            start = time.monotonic()
            text = self._send_with_retries(prompt)
            latency = int((time.monotonic() - start) * 1000)
        if self.recorder is not None:
            self.recorder.record(CompletionExchange(key, text, self.config.model, latency))
        return text

    def _send_with_retries(self, prompt: AssembledPrompt) -> str:
        attempt = 0
        while True:
            try:
                return self.backend.send(prompt, self.config)
            except TransportError:
                if attempt >= self.config.max_retries:
                    raise
                delay = BACKOFF_S[min(attempt, len(BACKOFF_S) - 1)]
                log.warning("transport failure, retrying in %.0fs", delay)
                self._sleep(delay)
                attempt += 1


def complete(prompt: AssembledPrompt, config: BackendConfig, backend: Backend | None = None) -> str:
    return CompletionClient(config, backend).complete(prompt)


_FENCE_RE = re.compile(r"^```[^\n]*\n(.*?)^```", re.MULTILINE | re.DOTALL)
_LEAD_RE = re.compile(r"(ARG|FROM)\b|#", re.IGNORECASE)


def candidate_dockerfile(response_text: str) -> str | None:
    """The Dockerfile-looking part of a response, without checking that it parses."""
    m = _FENCE_RE.search(response_text)
    if m:
        body = m.group(1)
        return body[:-1] if body.endswith("\n") else body
    for line in response_text.splitlines():
        if line.strip():
            return response_text if _LEAD_RE.match(line.strip()) else None
    return None


def extract_dockerfile(response_text: str) -> str:
    text = candidate_dockerfile(response_text)
    if text is None:
        raise ExtractionError("response contains no Dockerfile")
    try:
        parse(text)
    except DockerfileSyntaxError as exc:
        raise ExtractionError(f"extracted Dockerfile does not parse: {exc}") from exc
    return text
