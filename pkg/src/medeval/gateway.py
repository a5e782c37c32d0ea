"""Model gateway: provider dispatch, disk cache, retries, bounded concurrency.

Every completion is cached on disk keyed by (provider, model, temperature,
prompt hash), so reruns of an unchanged configuration never touch the network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import requests

from .prompting import RenderedPrompt

logger = logging.getLogger(__name__)

CACHE_VERSION = 1


class GatewayError(Exception):
    pass


class ProviderError(GatewayError):
    def __init__(self, message: str, status_code: int | None = None, body: str | None = None):
        self.status_code = status_code
        self.body = body
        super().__init__(message)


class TransientProviderError(ProviderError):
    """Retryable: rate limits, 5xx, dropped connections."""


class Timeout(TransientProviderError):
    pass


class AuthMissing(GatewayError):
    def __init__(self, env_var: str):
        self.env_var = env_var
        super().__init__(f"credential env var {env_var!r} is not set")


class CacheCorrupt(GatewayError):
    pass


@dataclass(frozen=True, slots=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff: float = 0.5

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.base_backoff < 0:
            raise ValueError("base_backoff must be >= 0")


@dataclass(frozen=True, slots=True)
class ProviderConfig:
    name: str
    model: str
    endpoint: str | None = None
    credential_env: str | None = None
    temperature: float = 0.0
    max_in_flight: int = 4
    timeout: float = 60.0
    retry: RetryPolicy = RetryPolicy()

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True, slots=True)
class Completion:
    note_id: str
    raw_text: str
    provider: str
    model: str
    prompt_hash: str
    from_cache: bool = False
    attempts: int = 1
    latency_ms: float = 0.0


@dataclass(frozen=True, slots=True)
class FailedCompletion:
    note_id: str
    prompt_hash: str
    error: str
    attempts: int


def cache_key(provider: str, model: str, temperature: float, prompt_hash: str) -> str:
    payload = f"{provider}\x1f{model}\x1f{temperature!r}\x1f{prompt_hash}"
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class DiskCache:
    """Content-addressed completion store with a human-readable sidecar index."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        if not path.exists():
            return None
        try:
            with open(path, encoding="utf-8") as fh:
                record = json.load(fh)
        except (json.JSONDecodeError, OSError) as exc:
            raise CacheCorrupt(f"unreadable cache entry {path}: {exc}") from exc
        if record.get("version") != CACHE_VERSION or "raw_text" not in record:
            raise CacheCorrupt(f"cache entry {path} has an unexpected shape")
        return record

    def put(self, key: str, record: dict, *, note_id: str, strategy: str, model: str) -> None:
        record = dict(record, version=CACHE_VERSION)
        path = self._path(key)
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
                json.dump(record, fh, sort_keys=True, ensure_ascii=True)
            tmp.replace(path)
            with open(self.root / "index.tsv", "a", encoding="utf-8", newline="\n") as fh:
                fh.write(f"{key}\t{note_id}\t{strategy}\t{model}\n")


class Provider(Protocol):
    name: str

    def send(self, prompt: RenderedPrompt, cfg: ProviderConfig) -> str: ...


class HttpChatProvider:
    """Chat-completions HTTP provider (OpenAI-style request and response)."""

    name = "http"

    def send(self, prompt: RenderedPrompt, cfg: ProviderConfig) -> str:
        if not cfg.endpoint:
            raise ProviderError("http provider requires an endpoint")
        headers = {"Content-Type": "application/json"}
        if cfg.credential_env:
            key = os.environ.get(cfg.credential_env)
            if not key:
                raise AuthMissing(cfg.credential_env)
            headers["Authorization"] = f"Bearer {key}"
        body = {
            "model": cfg.model,
            "temperature": cfg.temperature,
            "messages": [{"role": "user", "content": prompt.text}],
        }
        try:
            resp = requests.post(cfg.endpoint, headers=headers, json=body, timeout=cfg.timeout)
        except requests.Timeout as exc:
            raise Timeout(f"request timed out after {cfg.timeout}s") from exc
        except requests.RequestException as exc:
            raise TransientProviderError(f"transport failure: {exc}") from exc
        if resp.status_code == 200:
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, ValueError) as exc:
                raise ProviderError(f"malformed provider response: {exc}",
                                    status_code=200, body=resp.text[:500]) from exc
        if resp.status_code in (429, 500, 502, 503, 504):
            raise TransientProviderError(f"provider returned {resp.status_code}",
                                         status_code=resp.status_code, body=resp.text[:500])
        raise ProviderError(f"provider returned {resp.status_code}",
                            status_code=resp.status_code, body=resp.text[:500])


class MockProvider:
    """Fixture-driven provider for offline runs and fault-injection tests.

    `responses` maps note_id to the returned text. `scripts` maps note_id to a
    list consumed one item per call: a string succeeds, an int becomes an HTTP
    status error, an Exception is raised as-is.
    """

    name = "mock"

    def __init__(self, responses: dict[str, str] | None = None,
                 scripts: dict[str, list] | None = None,
                 default: str | None = None, delay: float = 0.0):
        self.responses = dict(responses or {})
        self.scripts = {k: list(v) for k, v in (scripts or {}).items()}
        self.default = default
        self.delay = delay
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight_seen = 0
        self._lock = threading.Lock()

    @classmethod
    def from_fixture(cls, path: str | Path) -> "MockProvider":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if "responses" in data:
            return cls(responses=data["responses"], default=data.get("default"))
        return cls(responses=data)

    def send(self, prompt: RenderedPrompt, cfg: ProviderConfig) -> str:
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight_seen = max(self.max_in_flight_seen, self.in_flight)
        try:
            if self.delay:
                time.sleep(self.delay)
            script = self.scripts.get(prompt.note_id)
            if script:
                item = script.pop(0)
                if isinstance(item, Exception):
                    raise item
                if isinstance(item, int):
                    if item in (429, 500, 502, 503, 504):
                        raise TransientProviderError(f"scripted {item}", status_code=item)
                    raise ProviderError(f"scripted {item}", status_code=item)
                return item
            if prompt.note_id in self.responses:
                return self.responses[prompt.note_id]
            if self.default is not None:
                return self.default
            raise ProviderError(f"no scripted response for note {prompt.note_id!r}")
        finally:
            with self._lock:
                self.in_flight -= 1


def complete(prompt: RenderedPrompt, cfg: ProviderConfig, cache: DiskCache | None,
             provider: Provider) -> Completion:
    """One completion, cache-first, with bounded exponential backoff on
    transient failures."""
    key = cache_key(cfg.name, cfg.model, cfg.temperature, prompt.text_hash)
    if cache is not None:
        record = cache.get(key)
        if record is not None:
            return Completion(
                note_id=prompt.note_id, raw_text=record["raw_text"],
                provider=cfg.name, model=cfg.model, prompt_hash=prompt.text_hash,
                from_cache=True, attempts=0, latency_ms=0.0,
            )
    last: TransientProviderError | None = None
    for attempt in range(1, cfg.retry.max_attempts + 1):
        start = time.perf_counter()
        try:
            raw = provider.send(prompt, cfg)
        except TransientProviderError as exc:
            last = exc
            if attempt < cfg.retry.max_attempts:
                time.sleep(cfg.retry.base_backoff * 2 ** (attempt - 1))
            continue
        latency = (time.perf_counter() - start) * 1000.0
        if cache is not None:
            cache.put(key, {"raw_text": raw, "note_id": prompt.note_id,
                            "prompt_hash": prompt.text_hash},
                      note_id=prompt.note_id, strategy=prompt.strategy_kind, model=cfg.model)
        return Completion(
            note_id=prompt.note_id, raw_text=raw, provider=cfg.name, model=cfg.model,
            prompt_hash=prompt.text_hash, from_cache=False, attempts=attempt,
            latency_ms=latency,
        )
    assert last is not None
    raise last


def complete_batch(prompts: Sequence[RenderedPrompt], cfg: ProviderConfig,
                   cache: DiskCache | None, provider: Provider
                   ) -> list[Completion | FailedCompletion]:
    """Completions in input order; per-item failures never abort the batch."""

    def one(prompt: RenderedPrompt) -> Completion | FailedCompletion:
        try:
            return complete(prompt, cfg, cache, provider)
        except GatewayError as exc:
            attempts = cfg.retry.max_attempts if isinstance(exc, TransientProviderError) else 1
            logger.warning("note %s failed after %d attempts: %s",
                           prompt.note_id, attempts, exc)
            return FailedCompletion(note_id=prompt.note_id, prompt_hash=prompt.text_hash,
                                    error=str(exc), attempts=attempts)

    with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
        results = list(pool.map(one, prompts))
    approx_tokens = sum(len(p.text) for p in prompts) // 4
    logger.info("dispatched %d prompts (~%d tokens), %d from work, %d failed",
                len(results), approx_tokens,
                sum(1 for r in results if isinstance(r, Completion) and not r.from_cache),
                sum(1 for r in results if isinstance(r, FailedCompletion)))
    return results
