"""Completion backends (HTTP, scripted, replay) and call accounting."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger(__name__)

VALID_TAGS = frozenset(
    {
        "text2sql",
        "decomposer",
        "text2python",
        "single_shot",
        "knowledge",
        "repair_sql",
        "repair_code",
    }
)


class TransportError(RuntimeError):
    pass


class AuthError(RuntimeError):
    pass


class ScriptExhausted(RuntimeError):
    def __init__(self, tag: str, index: int):
        super().__init__(f"no scripted response for tag {tag!r} occurrence {index}")
        self.tag = tag
        self.index = index


@dataclass(frozen=True)
class LlmRequest:
    model_id: str
    messages: tuple
    tag: str
    temperature: float | None = None
    max_tokens: int | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if self.tag not in VALID_TAGS:
            raise ValueError(f"unknown request tag: {self.tag!r}")
        for m in self.messages:
            if m.get("role") not in ("system", "user", "assistant"):
                raise ValueError(f"bad message role: {m.get('role')!r}")

    @classmethod
    def user(cls, prompt: str, tag: str, model_id: str = "default") -> "LlmRequest":
        return cls(model_id=model_id, messages=({"role": "user", "content": prompt},), tag=tag)


@dataclass
class LlmResponse:
    text: str
    usage: dict | None = None
    latency: float = 0.0


class CallLedger:
    """Thread-safe per-tag call counter for one (question, method, run)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._by_tag: Counter[str] = Counter()
        self.transport_retries = 0

    def record(self, tag: str) -> None:
        with self._lock:
            self._by_tag[tag] += 1

    def record_transport_retry(self) -> None:
        with self._lock:
            self.transport_retries += 1

    @property
    def total(self) -> int:
        with self._lock:
            return sum(self._by_tag.values())

    def by_tag(self) -> dict[str, int]:
        with self._lock:
            return dict(self._by_tag)


class Backend:
    """Interface: complete(request) -> LlmResponse."""

    def complete(self, req: LlmRequest) -> LlmResponse:
        raise NotImplementedError


class LedgeredBackend(Backend):
    """Counts every completion invocation, even ones that raise."""

    def __init__(self, inner: Backend, ledger: CallLedger):
        self.inner = inner
        self.ledger = ledger

    def complete(self, req: LlmRequest) -> LlmResponse:
        self.ledger.record(req.tag)
        return self.inner.complete(req)


class ScriptedBackend(Backend):
    """Replays canned responses keyed by (tag, per-tag occurrence index)."""

    def __init__(self, script: dict):
        # Accepts {(tag, index): text} or {tag: [text, ...]}.
        self._script: dict[tuple[str, int], str] = {}
        for key, value in script.items():
            if isinstance(key, tuple):
                self._script[(key[0], int(key[1]))] = value
            else:
                for i, text in enumerate(value):
                    self._script[(key, i)] = text
        self._counts: Counter[str] = Counter()
        self._lock = threading.Lock()

    def complete(self, req: LlmRequest) -> LlmResponse:
        with self._lock:
            index = self._counts[req.tag]
            self._counts[req.tag] += 1
        key = (req.tag, index)
        if key not in self._script:
            raise ScriptExhausted(req.tag, index)
        return LlmResponse(text=self._script[key])


class ScriptBook:
    """Per-question scripts, so worker scheduling cannot interleave replies.

    JSON layout:
      {"questions": {"<qid>" | "<qid>@<run>": {tag: [text, ...]},
                     ... optional "sandbox": [result documents ...]},
       "default": {tag: [...]}}
    Lookup order for (qid, run): "qid@run", then "qid", then default.
    """

    def __init__(self, questions: dict, default: dict | None = None):
        self.questions = questions
        self.default = default or {}

    @classmethod
    def load(cls, path: str | Path) -> "ScriptBook":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(questions=doc.get("questions", {}), default=doc.get("default"))

    def _entry_for(self, qid: str, run: int) -> dict:
        for key in (f"{qid}@{run}", qid):
            if key in self.questions:
                return self.questions[key]
        return self.default

    def backend_for(self, qid: str, run: int) -> ScriptedBackend:
        entry = self._entry_for(qid, run)
        return ScriptedBackend({t: v for t, v in entry.items() if t in VALID_TAGS})

    def sandbox_results_for(self, qid: str, run: int) -> list[dict]:
        return list(self._entry_for(qid, run).get("sandbox", []))


class RecordingBackend(Backend):
    """Mirrors every request/response pair to a replay log."""

    def __init__(self, inner: Backend, writer: "ReplayWriter", qid: str, run: int):
        self.inner = inner
        self.writer = writer
        self.qid = qid
        self.run = run
        self._counts: Counter[str] = Counter()

    def complete(self, req: LlmRequest) -> LlmResponse:
        index = self._counts[req.tag]
        self._counts[req.tag] += 1
        resp = self.inner.complete(req)
        self.writer.write(
            {
                "qid": self.qid,
                "run": self.run,
                "tag": req.tag,
                "index": index,
                "response": resp.text,
            }
        )
        return resp


class ReplayWriter:
    def __init__(self, path: str | Path):
        self._fh = open(path, "a", encoding="utf-8")
        self._lock = threading.Lock()

    def write(self, record: dict) -> None:
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._lock:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        with self._lock:
            self._fh.close()


def load_replay_as_scriptbook(path: str | Path) -> ScriptBook:
    """A replay log is itself a valid script source."""
    per_key: dict[str, dict[str, list[tuple[int, str]]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            entry = per_key.setdefault(f"{rec['qid']}@{rec['run']}", {})
            entry.setdefault(rec["tag"], []).append((rec["index"], rec["response"]))
    questions = {
        key: {tag: [text for _, text in sorted(pairs)] for tag, pairs in entry.items()}
        for key, entry in per_key.items()
    }
    return ScriptBook(questions=questions)


class RateLimiter:
    """Serializes request starts to at most requests_per_minute."""

    def __init__(self, requests_per_minute: float | None):
        self._interval = 60.0 / requests_per_minute if requests_per_minute else 0.0
        self._lock = threading.Lock()
        self._next_at = 0.0

    def wait(self) -> None:
        if not self._interval:
            return
        with self._lock:
            now = time.monotonic()
            start = max(now, self._next_at)
            self._next_at = start + self._interval
        delay = start - now
        if delay > 0:
            time.sleep(delay)


class HttpBackend(Backend):
    """Chat-completions JSON over HTTPS (model, messages -> choices[0])."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        transport_retries: int = 3,
        requests_per_minute: float | None = None,
        ledger: CallLedger | None = None,
        timeout: float = 300.0,
    ):
        self.base_url = (base_url or os.environ.get("LLM_API_BASE", "")).rstrip("/")
        self.api_key = api_key or os.environ.get("LLM_API_KEY", "")
        self.model = model or os.environ.get("LLM_MODEL", "")
        if not self.base_url:
            raise ValueError("LLM_API_BASE is not configured")
        self.transport_retries = transport_retries
        self.limiter = RateLimiter(requests_per_minute)
        self.ledger = ledger
        self.timeout = timeout

    def complete(self, req: LlmRequest) -> LlmResponse:
        import requests

        payload: dict = {
            "model": self.model or req.model_id,
            "messages": list(req.messages),
        }
        if req.temperature is not None:
            payload["temperature"] = req.temperature
        if req.max_tokens is not None:
            payload["max_tokens"] = req.max_tokens
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.base_url}/chat/completions"
        last_error: Exception | None = None
        started = time.monotonic()
        for attempt in range(self.transport_retries + 1):
            if attempt:
                if self.ledger is not None:
                    self.ledger.record_transport_retry()
                time.sleep(min(2.0 ** (attempt - 1), 30.0))
            self.limiter.wait()
            try:
                resp = requests.post(url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                log.warning("transport failure (attempt %d): %s", attempt + 1, exc)
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"API returned {resp.status_code}")
            if resp.status_code >= 500 or resp.status_code == 429:
                last_error = TransportError(f"HTTP {resp.status_code}")
                log.warning("retryable status %d (attempt %d)", resp.status_code, attempt + 1)
                continue
            if resp.status_code != 200:
                raise TransportError(f"HTTP {resp.status_code}: {resp.text[:500]}")
            doc = resp.json()
            text = doc["choices"][0]["message"]["content"] or ""
            return LlmResponse(
                text=text,
                usage=doc.get("usage"),
                latency=time.monotonic() - started,
            )
        raise TransportError(f"transport retries exhausted: {last_error}")


def scripted_backend(script: dict) -> ScriptedBackend:
    return ScriptedBackend(script)


@dataclass
class BackendSpec:
    """Parsed form of the --backend flag."""

    kind: str  # http | scripted | replay
    path: str | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "BackendSpec":
        if text == "http":
            return cls(kind="http")
        for prefix in ("scripted:", "replay:"):
            if text.startswith(prefix):
                path = text[len(prefix):]
                if not path:
                    raise ValueError(f"backend spec {prefix!r} requires a path")
                return cls(kind=prefix[:-1], path=path)
        raise ValueError(f"unknown backend spec: {text!r}")
