"""Chat-completion backends with caching, retries, auditing and a scripted mock."""

from __future__ import annotations

import ast
import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import requests
import yaml

logger = logging.getLogger(__name__)

PURPOSES = ("sample", "analyze", "crossover", "mutate", "init", "loss", "refine", "predict")
GENERATIVE = frozenset({"sample", "analyze", "crossover", "mutate", "refine"})


class LlmError(RuntimeError):
    pass


class TransientLlmError(LlmError):
    """Retryable failure (timeouts, 5xx, rate limiting)."""


class LlmAuthError(LlmError):
    pass


class ScriptError(LlmError):
    """The mock script cannot answer a request."""


class StructuredOutputError(ValueError):
    pass


@dataclass(frozen=True)
class LlmRequest:
    system: str
    user: str
    purpose: str
    temperature: float | None = None
    max_tokens: int = 1024

    def __post_init__(self):
        if self.purpose not in PURPOSES:
            raise ValueError(f"unknown purpose {self.purpose!r}; expected one of {PURPOSES}")

    def decoding(self) -> tuple[float, int]:
        temp = self.temperature
        if temp is None:
            temp = 0.7 if self.purpose in GENERATIVE else 0.0
        return temp, self.max_tokens


@dataclass(frozen=True)
class LlmResponse:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency: float = 0.0
    provider: str = ""
    cache_hit: bool = False


# --------------------------------------------------------------------------
# Providers
# --------------------------------------------------------------------------

class Provider:
    """Minimal provider interface: send one request, return text and usage."""

    provider_id = "abstract"

    def send(self, req: LlmRequest) -> tuple[str, int, int]:
        raise NotImplementedError


class ChatCompletionProvider(Provider):
    """OpenAI-compatible ``/chat/completions`` endpoint over HTTPS."""

    def __init__(self, model: str, base_url: str = "https://api.openai.com/v1", api_key_env: str = "OPENAI_API_KEY", timeout: float = 60.0):
        self.model = model
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.provider_id = f"chat:{self.base_url}:{model}"

    def send(self, req: LlmRequest) -> tuple[str, int, int]:
        key = os.environ.get(self.api_key_env)
        if not key:
            raise LlmAuthError(f"environment variable {self.api_key_env} is not set")
        temperature, max_tokens = req.decoding()
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
            "temperature": temperature,
            "max_tokens": max_tokens,
        }
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions",
                json=payload,
                headers={"Authorization": f"Bearer {key}"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransientLlmError(str(exc)) from exc
        if resp.status_code in (401, 403):
            raise LlmAuthError(f"authentication failed ({resp.status_code})")
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientLlmError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise LlmError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        body = resp.json()
        usage = body.get("usage") or {}
        return (
            body["choices"][0]["message"]["content"] or "",
            int(usage.get("prompt_tokens", 0)),
            int(usage.get("completion_tokens", 0)),
        )


@dataclass
class ScriptEntry:
    purpose: str
    response: Any  # str, Exception, or callable(LlmRequest) -> str
    contains: str | None = None
    repeat: bool = False

    def matches(self, req: LlmRequest) -> bool:
        if self.purpose != req.purpose:
            return False
        return self.contains is None or self.contains in req.system or self.contains in req.user


class MockProvider(Provider):
    """Deterministic scripted backend.

    Each request consumes the first unused entry of its purpose queue whose
    ``contains`` substring (if any) occurs in the prompt.  ``repeat`` entries
    are never consumed.  Responses may be strings, exceptions (raised), or
    callables of the request.
    """

    provider_id = "mock"

    def __init__(self, script: Iterable):
        self._queues: dict[str, list[ScriptEntry]] = defaultdict(list)
        self._lock = threading.Lock()
        self.calls: list[LlmRequest] = []
        n = 0
        for item in script:
            entry = _to_entry(item)
            self._queues[entry.purpose].append(entry)
            n += 1
        if n == 0:
            raise ScriptError("mock script is empty")

    @classmethod
    def from_file(cls, path) -> "MockProvider":
        with open(path, encoding="utf-8") as fh:
            items = yaml.safe_load(fh)
        return cls(items)

    def calls_for(self, purpose: str) -> list[LlmRequest]:
        return [c for c in self.calls if c.purpose == purpose]

    def send(self, req: LlmRequest) -> tuple[str, int, int]:
        with self._lock:
            self.calls.append(req)
            queue = self._queues.get(req.purpose, [])
            for i, entry in enumerate(queue):
                if entry.matches(req):
                    if not entry.repeat:
                        queue.pop(i)
                    break
            else:
                exhausted = "script exhausted" if req.purpose in self._queues else "no script entry"
                raise ScriptError(
                    f"{exhausted} for purpose={req.purpose!r}; request text: {req.user[:300]!r}"
                )
        response = entry.response
        if isinstance(response, BaseException):
            raise response
        if callable(response):
            response = response(req)
        text = str(response)
        return text, len(req.system.split()) + len(req.user.split()), len(text.split())


def _to_entry(item) -> ScriptEntry:
    if isinstance(item, ScriptEntry):
        return item
    if isinstance(item, tuple):
        matcher, response = item
        if isinstance(matcher, tuple):
            purpose, contains = matcher
        else:
            purpose, contains = matcher, None
        return ScriptEntry(purpose, response, contains)
    if isinstance(item, Mapping):
        response = item["response"]
        if isinstance(response, (dict, list)):
            response = json.dumps(response)
        elif item.get("error"):
            response = TransientLlmError(str(response))
        return ScriptEntry(item["purpose"], response, item.get("contains"), bool(item.get("repeat", False)))
    raise ScriptError(f"bad script entry {item!r}")


def mock_backend(script: Iterable, **kwargs) -> "LlmClient":
    """Scripted client for offline runs; see :class:`MockProvider`."""
    return LlmClient(MockProvider(script), **kwargs)


# --------------------------------------------------------------------------
# Cache and audit
# --------------------------------------------------------------------------

def cache_key(req: LlmRequest, provider_id: str) -> str:
    temperature, max_tokens = req.decoding()
    blob = json.dumps([req.system, req.user, temperature, max_tokens, provider_id], ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ResponseCache:
    """Append-only JSON-lines response cache, optionally backed by a file.

    Requests decoded at positive temperature are samples, so repeats of an
    identical prompt within one run get distinct slots by occurrence count;
    deterministic requests share a single slot.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._data: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        rec = json.loads(line)
                        self._data[rec["key"]] = rec

    def __len__(self) -> int:
        return len(self._data)

    def get(self, key: str) -> dict | None:
        with self._lock:
            return self._data.get(key)

    def put(self, key: str, record: dict) -> None:
        with self._lock:
            record = {"key": key, **record}
            self._data[key] = record
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, ensure_ascii=False) + "\n")


class AuditLog:
    """Line-delimited log of every request/response/failure."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._lock = threading.Lock()

    def write(self, **record) -> None:
        with self._lock:
            self.records.append(record)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, ensure_ascii=False, default=str) + "\n")


class RateLimiter:
    """Spaces calls at least ``1 / per_second`` apart."""

    def __init__(self, per_second: float | None = None):
        self.interval = 1.0 / per_second if per_second else 0.0
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            delay = self._next - now
            self._next = max(now, self._next) + self.interval
        if delay > 0:
            time.sleep(delay)


# --------------------------------------------------------------------------
# Client
# --------------------------------------------------------------------------

class LlmClient:
    """Provider wrapper adding cache lookup, retry with backoff and auditing."""

    def __init__(
        self,
        provider: Provider,
        *,
        cache: ResponseCache | None = None,
        audit: AuditLog | None = None,
        retries: int = 3,
        backoff: float = 1.0,
        rate_limit: float | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.provider = provider
        self.cache = cache
        self.audit = audit if audit is not None else AuditLog()
        self.retries = retries
        self.backoff = backoff
        self.limiter = RateLimiter(rate_limit)
        self._sleep = sleep
        self._occurrences: dict[str, int] = defaultdict(int)
        self._occ_lock = threading.Lock()
        self.usage = {"calls": 0, "prompt_tokens": 0, "completion_tokens": 0}

    @property
    def provider_id(self) -> str:
        return self.provider.provider_id

    def _slot(self, req: LlmRequest) -> str:
        base = cache_key(req, self.provider_id)
        if req.decoding()[0] <= 0:
            return base
        with self._occ_lock:
            n = self._occurrences[base]
            self._occurrences[base] += 1
        return f"{base}:{n}"

    def complete(self, req: LlmRequest) -> LlmResponse:
        slot = self._slot(req) if self.cache is not None else None
        if slot is not None:
            hit = self.cache.get(slot)
            if hit is not None:
                self.audit.write(event="cache_hit", purpose=req.purpose, key=slot, text=hit["text"])
                return LlmResponse(hit["text"], hit.get("prompt_tokens", 0), hit.get("completion_tokens", 0), 0.0, self.provider_id, True)

        attempt = 0
        while True:
            self.limiter.wait()
            started = time.monotonic()
            try:
                text, p_tok, c_tok = self.provider.send(req)
            except TransientLlmError as exc:
                self.audit.write(event="error", purpose=req.purpose, attempt=attempt, error=str(exc), system=req.system, user=req.user)
                if attempt >= self.retries:
                    raise LlmError(f"{req.purpose}: retries exhausted ({exc})") from exc
                self._sleep(self.backoff * (2 ** attempt))
                attempt += 1
                continue
            except LlmError as exc:
                self.audit.write(event="error", purpose=req.purpose, attempt=attempt, error=str(exc), system=req.system, user=req.user)
                raise
            latency = time.monotonic() - started
            break

        self.usage["calls"] += 1
        self.usage["prompt_tokens"] += p_tok
        self.usage["completion_tokens"] += c_tok
        self.audit.write(event="response", purpose=req.purpose, attempt=attempt, system=req.system, user=req.user, text=text)
        if slot is not None:
            self.cache.put(slot, {"text": text, "prompt_tokens": p_tok, "completion_tokens": c_tok, "purpose": req.purpose})
        return LlmResponse(text, p_tok, c_tok, latency, self.provider_id, False)


def client_from_config(cfg: Mapping | None, *, mock_script=None, cache_path=None, audit_path=None) -> LlmClient:
    """Build a client from the ``llm`` block of a pipeline config."""
    cfg = dict(cfg or {})
    if mock_script is not None:
        provider = MockProvider.from_file(mock_script) if isinstance(mock_script, (str, Path)) else MockProvider(mock_script)
    elif cfg.get("provider", "chat") == "mock":
        provider = MockProvider.from_file(cfg["mock_script"])
    else:
        provider = ChatCompletionProvider(
            model=cfg.get("model", "gpt-4o-mini"),
            base_url=cfg.get("base_url", "https://api.openai.com/v1"),
            api_key_env=cfg.get("api_key_env", "OPENAI_API_KEY"),
            timeout=float(cfg.get("timeout", 60.0)),
        )
    cache_path = cache_path or cfg.get("cache_path")
    audit_path = audit_path or cfg.get("audit_path")
    return LlmClient(
        provider,
        cache=ResponseCache(cache_path) if cfg.get("cache", True) else None,
        audit=AuditLog(audit_path),
        retries=int(cfg.get("retries", 3)),
        backoff=float(cfg.get("backoff", 1.0)),
        rate_limit=cfg.get("rate_limit"),
    )


# --------------------------------------------------------------------------
# Structured output extraction
# --------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:[A-Za-z]*)?\s*\n?(.*?)```", re.DOTALL)


def _balanced_spans(text: str) -> Iterable[str]:
    """Yield bracket-balanced substrings starting at each ``{``/``[``/``(``."""
    pairs = {"{": "}", "[": "]", "(": ")"}
    for start, ch in enumerate(text):
        if ch not in "{[":
            continue
        stack = []
        quote = None
        escaped = False
        for i in range(start, len(text)):
            c = text[i]
            if quote:
                if escaped:
                    escaped = False
                elif c == "\\":
                    escaped = True
                elif c == quote:
                    quote = None
                continue
            if c in "\"'":
                quote = c
            elif c in pairs:
                stack.append(pairs[c])
            elif c in ")]}":
                if not stack or stack.pop() != c:
                    break
                if not stack:
                    yield text[start:i + 1]
                    break


def _load(fragment: str):
    try:
        return json.loads(fragment)
    except ValueError:
        pass
    try:
        return ast.literal_eval(fragment)
    except (ValueError, SyntaxError, MemoryError, RecursionError):
        return None


def _shape_ok(value, keys, arity) -> bool:
    if keys is not None:
        return isinstance(value, dict) and set(value) == set(keys)
    if arity is not None:
        return (
            isinstance(value, list)
            and all(isinstance(v, (list, tuple)) and len(v) == arity for v in value)
        )
    return isinstance(value, (list, dict))


def extract_structured(text: str, *, keys: Iterable[str] | None = None, arity: int | None = None):
    """Pull the first JSON/Python-literal object or list of the expected shape out of free text.

    ``keys`` requests a dict with exactly that key set; ``arity`` requests a
    list of tuples of that length (returned as tuples).  Code fences, leading
    prose and trailing text are tolerated.
    """
    keys = set(keys) if keys is not None else None
    sources = [m.group(1) for m in _FENCE_RE.finditer(text)] + [text]
    seen_any = False
    for src in sources:
        for frag in _balanced_spans(src):
            value = _load(frag)
            if value is None:
                continue
            seen_any = True
            if _shape_ok(value, keys, arity):
                if arity is not None:
                    return [tuple(v) for v in value]
                return value
    if keys is not None and seen_any:
        raise StructuredOutputError(f"no object with keys {sorted(keys)} found")
    raise StructuredOutputError("no structured value of the expected shape found")


def request_to_dict(req: LlmRequest) -> dict:
    return asdict(req)
