"""Clients for the chat LLM, embedding and web-search services.

All three go through one :class:`Gateway` that can run live, record
responses to a line-oriented cache, or replay from that cache without any
network access. Cache files live in one directory, one file per service::

    <cache_dir>/chat.jsonl
    <cache_dir>/embed.jsonl
    <cache_dir>/search.jsonl

Each line is ``{"key", "service", "request", "response", "captured_at"}``.
The key is the SHA-256 of the canonical JSON of ``{"service", "request"}``;
the only normalization applied first is stripping trailing whitespace from
chat prompts.

Credentials come from the environment only:

    RAVE_LLM_API_KEY     chat completions
    RAVE_EMBED_API_KEY   embeddings
    RAVE_SEARCH_API_KEY  Google Custom Search JSON API
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

import httpx

from rave.model import domain_from_url

logger = logging.getLogger(__name__)

LLM_KEY_ENV = "RAVE_LLM_API_KEY"
EMBED_KEY_ENV = "RAVE_EMBED_API_KEY"
SEARCH_KEY_ENV = "RAVE_SEARCH_API_KEY"

SERVICES = ("chat", "embed", "search")
_CSE_PAGE = 10


class GatewayMode(str, enum.Enum):
    LIVE = "LIVE"
    RECORD = "RECORD"
    REPLAY = "REPLAY"


class GatewayError(Exception):
    """Base class for service failures."""


class CacheMissError(GatewayError):
    def __init__(self, service: str, key: str):
        super().__init__(f"replay cache miss for {service} request {key}")
        self.service = service
        self.key = key


class TransportFailure(GatewayError):
    """Network-level failure that persisted through every retry."""


class ServiceError(GatewayError):
    """Non-2xx response; not retried."""

    def __init__(self, service: str, status: int, message: str):
        super().__init__(f"{service} service returned HTTP {status}: {message}")
        self.service = service
        self.status = status
        self.message = message


class QuotaError(ServiceError):
    """Search quota or rate limit exhausted (distinct from an empty result set)."""


class CredentialsError(GatewayError):
    pass


class ResponseFormatError(GatewayError):
    """A 2xx response whose body does not have the expected shape."""


@dataclass(frozen=True)
class LlmRequest:
    prompt: str
    model_id: str = "gpt-4o-2024-08-06"
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 500


@dataclass(frozen=True)
class CacheKey:
    service: str
    digest: str


@dataclass(frozen=True)
class SearchHit:
    title: str
    url: str
    text: str
    domain: str
    rank: int


@dataclass
class GatewayConfig:
    mode: GatewayMode = GatewayMode.REPLAY
    model_id: str = "gpt-4o-2024-08-06"
    embed_model_id: str = "text-embedding-3-small"
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 500
    results_per_query: int = 5
    retries: int = 3
    backoff_seconds: float = 0.5
    timeout_seconds: float = 30.0
    cache_dir: Optional[str] = None
    llm_base_url: str = "https://api.openai.com/v1"
    embed_base_url: str = "https://api.openai.com/v1"
    search_url: str = "https://www.googleapis.com/customsearch/v1"
    search_engine_id: str = ""

    def llm_request(self, prompt: str) -> LlmRequest:
        return LlmRequest(
            prompt=prompt,
            model_id=self.model_id,
            temperature=self.temperature,
            top_p=self.top_p,
            max_tokens=self.max_tokens,
        )


def normalize_request(service: str, request: Mapping[str, Any]) -> dict[str, Any]:
    req = dict(request)
    if service == "chat":
        req["prompt"] = req["prompt"].rstrip()
    return req


def cache_key(service: str, request: Mapping[str, Any]) -> CacheKey:
    """Pure, field-order independent digest of a normalized request."""
    if service not in SERVICES:
        raise ValueError(f"unknown service {service!r}")
    payload = {"service": service, "request": normalize_request(service, request)}
    canonical = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return CacheKey(service, hashlib.sha256(canonical.encode("utf-8")).hexdigest())


class ResponseCache:
    """Append-only response store, one JSONL file per service.

    Readers see an immutable snapshot dict; writers replace the snapshot and
    append to the file under a single lock.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._lock = threading.Lock()
        self._entries: dict[str, dict[str, Any]] = {s: {} for s in SERVICES}
        for service in SERVICES:
            path = self.path(service)
            if not path.exists():
                continue
            entries = {}
            with path.open(encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    if not line.strip():
                        continue
                    try:
                        row = json.loads(line)
                        entries[row["key"]] = row["response"]
                    except (json.JSONDecodeError, KeyError) as exc:
                        raise ValueError(f"{path}:{lineno}: corrupt cache line") from exc
            self._entries[service] = entries

    def path(self, service: str) -> Path:
        return self.directory / f"{service}.jsonl"

    def get(self, key: CacheKey) -> Any:
        return self._entries[key.service].get(key.digest)

    def __contains__(self, key: CacheKey) -> bool:
        return key.digest in self._entries[key.service]

    def __len__(self) -> int:
        return sum(len(e) for e in self._entries.values())

    def put(self, key: CacheKey, request: Mapping[str, Any], response: Any) -> None:
        row = {
            "key": key.digest,
            "service": key.service,
            "request": normalize_request(key.service, request),
            "response": response,
            "captured_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        line = json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n"
        with self._lock:
            if key.digest in self._entries[key.service]:
                return
            self.directory.mkdir(parents=True, exist_ok=True)
            with self.path(key.service).open("a", encoding="utf-8", newline="\n") as fh:
                fh.write(line)
            updated = dict(self._entries[key.service])
            updated[key.digest] = response
            self._entries[key.service] = updated

    def digest(self) -> str:
        h = hashlib.sha256()
        for service in SERVICES:
            path = self.path(service)
            h.update(service.encode())
            if path.exists():
                h.update(path.read_bytes())
        return h.hexdigest()


class Gateway:
    """Mode-aware access to chat, embedding and search services.

    ``client`` may be any ``httpx.Client``; tests pass one built on
    ``httpx.MockTransport``. ``network_calls`` counts every HTTP attempt.
    """

    def __init__(
        self,
        config: GatewayConfig,
        *,
        client: Optional[httpx.Client] = None,
        cache: Optional[ResponseCache] = None,
        env: Optional[Mapping[str, str]] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.config = config
        self.mode = GatewayMode(config.mode)
        if cache is None and config.cache_dir:
            cache = ResponseCache(config.cache_dir)
        if self.mode is not GatewayMode.LIVE and cache is None:
            raise ValueError(f"{self.mode.value} mode needs a cache directory")
        self.cache = cache
        self._client = client
        self._env = os.environ if env is None else env
        self._sleep = sleep
        self._memo: dict[str, list[float]] = {}
        self._count_lock = threading.Lock()
        self.network_calls = 0

    # -- credentials / transport ----------------------------------------------

    def _credential(self, var: str) -> str:
        value = self._env.get(var, "")
        if not value:
            raise CredentialsError(f"environment variable {var} is not set")
        return value

    def check_credentials(self, services: Sequence[str] = SERVICES) -> None:
        """Fail fast when a live-capable mode lacks keys for the services it will call."""
        if self.mode is GatewayMode.REPLAY:
            return
        needed = {"chat": LLM_KEY_ENV, "embed": EMBED_KEY_ENV, "search": SEARCH_KEY_ENV}
        missing = [needed[s] for s in services if not self._env.get(needed[s])]
        if "search" in services and not self.config.search_engine_id:
            missing.append("search_engine_id (config)")
        if missing:
            raise CredentialsError("missing credentials: " + ", ".join(missing))

    @property
    def client(self) -> httpx.Client:
        if self._client is None:
            self._client = httpx.Client(timeout=self.config.timeout_seconds)
        return self._client

    def _send(self, service: str, method: str, url: str, **kwargs: Any) -> Any:
        attempts = self.config.retries + 1
        for attempt in range(attempts):
            with self._count_lock:
                self.network_calls += 1
            try:
                resp = self.client.request(method, url, **kwargs)
            except httpx.TransportError as exc:
                if attempt + 1 >= attempts:
                    raise TransportFailure(f"{service}: {exc!r} after {attempts} attempts") from exc
                delay = self.config.backoff_seconds * (2**attempt)
                logger.warning("%s transport error (%s); retry %d in %.1fs", service, exc, attempt + 1, delay)
                self._sleep(delay)
                continue
            if resp.status_code // 100 != 2:
                message = _error_message(resp)
                if service == "search" and (resp.status_code == 429 or "quota" in message.lower() or "ratelimit" in message.lower()):
                    raise QuotaError(service, resp.status_code, message)
                raise ServiceError(service, resp.status_code, message)
            try:
                return resp.json()
            except ValueError as exc:
                raise ResponseFormatError(f"{service}: response body is not JSON") from exc
        raise AssertionError("unreachable")

    def _lookup(self, key: CacheKey) -> Any:
        if self.mode is GatewayMode.LIVE:
            return None
        hit = self.cache.get(key)
        if hit is None and self.mode is GatewayMode.REPLAY:
            raise CacheMissError(key.service, key.digest)
        return hit

    def _store(self, key: CacheKey, request: Mapping[str, Any], response: Any) -> None:
        if self.mode is GatewayMode.RECORD:
            self.cache.put(key, request, response)

    # -- chat ------------------------------------------------------------------

    def chat(self, request: LlmRequest) -> str:
        payload = asdict(request)
        key = cache_key("chat", payload)
        hit = self._lookup(key)
        if hit is not None:
            return hit["text"]
        body = self._send(
            "chat",
            "POST",
            self.config.llm_base_url.rstrip("/") + "/chat/completions",
            headers={"Authorization": f"Bearer {self._credential(LLM_KEY_ENV)}"},
            json={
                "model": request.model_id,
                "messages": [{"role": "user", "content": request.prompt}],
                "temperature": request.temperature,
                "top_p": request.top_p,
                "max_tokens": request.max_tokens,
            },
        )
        try:
            text = body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise ResponseFormatError("chat: no choices[0].message.content in response") from exc
        self._store(key, payload, {"text": text})
        return text

    def complete(self, prompt: str) -> str:
        return self.chat(self.config.llm_request(prompt))

    # -- embeddings ------------------------------------------------------------

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        """One vector per text, order preserved; misses are fetched in one batch."""
        if not texts:
            raise ValueError("embed() needs at least one text")
        if any(not t.strip() for t in texts):
            raise ValueError("embed() texts must be non-empty")
        model = self.config.embed_model_id
        requests = [{"model_id": model, "text": t} for t in texts]
        keys = [cache_key("embed", r) for r in requests]
        out: list[Optional[list[float]]] = [None] * len(texts)
        missing: dict[str, list[int]] = {}
        for i, key in enumerate(keys):
            if key.digest in self._memo:
                out[i] = self._memo[key.digest]
                continue
            hit = self._lookup(key)
            if hit is not None:
                out[i] = hit["vector"]
            else:
                missing.setdefault(texts[i], []).append(i)
        if missing:
            batch = list(missing)
            body = self._send(
                "embed",
                "POST",
                self.config.embed_base_url.rstrip("/") + "/embeddings",
                headers={"Authorization": f"Bearer {self._credential(EMBED_KEY_ENV)}"},
                json={"model": model, "input": batch},
            )
            try:
                rows = sorted(body["data"], key=lambda d: d["index"])
                vectors = [[float(x) for x in row["embedding"]] for row in rows]
            except (KeyError, TypeError, ValueError) as exc:
                raise ResponseFormatError("embed: malformed embeddings response") from exc
            if len(vectors) != len(batch):
                raise ResponseFormatError(f"embed: asked for {len(batch)} vectors, got {len(vectors)}")
            for text, vec in zip(batch, vectors):
                request = {"model_id": model, "text": text}
                key = cache_key("embed", request)
                self._store(key, request, {"vector": vec})
                self._memo[key.digest] = vec
                for i in missing[text]:
                    out[i] = vec
        dims = {len(v) for v in out}
        if len(dims) != 1:
            raise ResponseFormatError(f"embed: inconsistent vector dimensions {sorted(dims)}")
        return out  # type: ignore[return-value]

    # -- search ----------------------------------------------------------------

    def search(self, query: str, results_per_query: Optional[int] = None) -> list[SearchHit]:
        """Top results for ``query`` in engine order; an empty list is a valid answer."""
        n = results_per_query or self.config.results_per_query
        if not query.strip():
            raise ValueError("search query is empty")
        if n < 1:
            raise ValueError("results_per_query must be >= 1")
        request = {"engine": "google-cse", "query": query, "num": n}
        key = cache_key("search", request)
        hit = self._lookup(key)
        if hit is None:
            items = self._search_live(query, n)
            hit = {"items": items}
            self._store(key, request, hit)
        hits = []
        for item in hit["items"][:n]:
            try:
                domain = domain_from_url(item["url"])
            except ValueError:
                logger.warning("search %r: skipping result with unparseable url %r", query, item.get("url"))
                continue
            hits.append(SearchHit(item.get("title", ""), item["url"], item.get("snippet", ""), domain, len(hits) + 1))
        return hits

    def _search_live(self, query: str, n: int) -> list[dict[str, str]]:
        key = self._credential(SEARCH_KEY_ENV)
        items: list[dict[str, str]] = []
        start = 1
        while len(items) < n:
            page = min(_CSE_PAGE, n - len(items))
            body = self._send(
                "search",
                "GET",
                self.config.search_url,
                params={"key": key, "cx": self.config.search_engine_id, "q": query, "num": page, "start": start},
            )
            batch = body.get("items") or []
            for it in batch:
                if "link" in it:
                    items.append({"title": it.get("title", ""), "url": it["link"], "snippet": it.get("snippet", "")})
            if len(batch) < page:
                break
            start += page
        return items[:n]


def _error_message(resp: httpx.Response) -> str:
    try:
        body = resp.json()
    except ValueError:
        return resp.text[:500]
    err = body.get("error") if isinstance(body, dict) else None
    if isinstance(err, dict):
        return str(err.get("message") or err)
    if err:
        return str(err)
    return json.dumps(body)[:500]
