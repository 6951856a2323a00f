"""Content-addressed response cache: ``<dir>/<2-char shard>/<digest>.json``."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .types import Backend, ChatRequest, ChatResponse, EmbeddingRequest


@dataclass(frozen=True)
class CacheKey:
    digest: str

    @property
    def shard(self) -> str:
        return self.digest[:2]


def cache_key(kind: str, model_id: str, payload) -> CacheKey:
    blob = json.dumps({"kind": kind, "model_id": model_id, "payload": payload}, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return CacheKey(hashlib.sha256(blob.encode("utf-8")).hexdigest())


def chat_key(req: ChatRequest) -> CacheKey:
    return cache_key("chat", req.model_id, req.canonical())


def embed_key(req: EmbeddingRequest) -> CacheKey:
    return cache_key(f"embed:{req.kind}", req.model_id, req.payload)


class ResponseCache:
    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def path(self, key: CacheKey) -> Path:
        return self.directory / key.shard / f"{key.digest}.json"

    def _lock_for(self, key: CacheKey) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key.digest, threading.Lock())

    def get(self, key: CacheKey) -> dict | None:
        p = self.path(key)
        if not p.exists():
            return None
        try:
            return json.loads(p.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            return None

    def put(self, key: CacheKey, value: dict) -> None:
        p = self.path(key)
        with self._lock_for(key):
            p.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=p.parent, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(value, fh, ensure_ascii=False, sort_keys=True)
            os.replace(tmp, p)

    def __len__(self) -> int:
        return sum(1 for _ in self.directory.glob("*/*.json")) if self.directory.exists() else 0


class CachedBackend(Backend):
    """Serve repeated requests from disk; only misses reach ``inner``."""

    def __init__(self, inner: Backend, cache: ResponseCache):
        super().__init__()
        self.inner = inner
        self.cache = cache
        self.name = f"cached({inner.name})"
        self.chat_model = inner.chat_model
        self.embed_model = inner.embed_model
        self.hits = 0
        self.misses = 0

    def _tally(self, hit: bool) -> None:
        with self._lock:
            if hit:
                self.hits += 1
            else:
                self.misses += 1

    def _chat(self, req: ChatRequest) -> ChatResponse:
        key = chat_key(req)
        entry = self.cache.get(key)
        if entry is not None:
            self._tally(True)
            return ChatResponse(entry["text"], entry.get("usage", {}), cached=True)
        self._tally(False)
        resp = self.inner.chat(req)
        self.cache.put(key, {"kind": "chat", "model_id": req.model_id, "text": resp.text, "usage": resp.usage})
        return ChatResponse(resp.text, resp.usage, cached=False)

    def _embed(self, req: EmbeddingRequest) -> np.ndarray:
        key = embed_key(req)
        entry = self.cache.get(key)
        if entry is not None:
            self._tally(True)
            return np.asarray(entry["vector"], dtype=np.float64)
        self._tally(False)
        vec = self.inner.embed(req)
        self.cache.put(key, {"kind": f"embed:{req.kind}", "model_id": req.model_id, "vector": [float(x) for x in vec]})
        return vec
