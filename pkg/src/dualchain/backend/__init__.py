"""Chat and embedding clients, the response cache and the offline mock."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .cache import CacheKey, CachedBackend, ResponseCache, cache_key, chat_key, embed_key
from .http import HTTPBackend
from .mock import MockBackend, MockRule, hash_to_sphere, mock_backend
from .types import (
    Backend,
    BackendError,
    ChatRequest,
    ChatResponse,
    EmbeddingDimensionError,
    EmbeddingRequest,
    ImagePart,
    MalformedResponse,
    Message,
    RateLimited,
    TextPart,
    TransportError,
)

ENV_ENDPOINT = "DUALCHAIN_ENDPOINT"
ENV_API_KEY = "DUALCHAIN_API_KEY"
ENV_CACHE = "DUALCHAIN_CACHE"


@dataclass
class BackendConfig:
    kind: str = "mock"  # "mock" | "http"
    endpoint: str | None = None
    api_key: str | None = None
    chat_model: str = "default"
    embed_model: str = "default"
    seed: int = 0
    cache_dir: str | None = None
    max_in_flight: int = 8
    retries: int = 3
    backoff_s: float = 0.5
    timeout_s: float = 60.0
    mock_options: dict = field(default_factory=dict)

    def with_env(self) -> "BackendConfig":
        """Fill unset endpoint/credential/cache fields from the environment."""
        return BackendConfig(
            **{
                **self.__dict__,
                "endpoint": self.endpoint or os.environ.get(ENV_ENDPOINT),
                "api_key": self.api_key or os.environ.get(ENV_API_KEY),
                "cache_dir": self.cache_dir or os.environ.get(ENV_CACHE),
            }
        )


def make_backend(cfg: BackendConfig, image_root=None) -> Backend:
    if cfg.kind == "mock":
        backend: Backend = MockBackend(cfg.seed, **cfg.mock_options)
    elif cfg.kind == "http":
        if not cfg.endpoint:
            raise BackendError(f"http backend needs an endpoint (set {ENV_ENDPOINT} or --endpoint)")
        backend = HTTPBackend(
            cfg.endpoint,
            api_key=cfg.api_key,
            chat_model=cfg.chat_model,
            embed_model=cfg.embed_model,
            timeout_s=cfg.timeout_s,
            retries=cfg.retries,
            backoff_s=cfg.backoff_s,
            max_in_flight=cfg.max_in_flight,
            image_root=image_root,
        )
    else:
        raise BackendError(f"unknown backend kind {cfg.kind!r}")
    if cfg.cache_dir:
        backend = CachedBackend(backend, ResponseCache(cfg.cache_dir))
    return backend


__all__ = [
    "Backend",
    "BackendConfig",
    "BackendError",
    "CacheKey",
    "CachedBackend",
    "ChatRequest",
    "ChatResponse",
    "EmbeddingDimensionError",
    "EmbeddingRequest",
    "HTTPBackend",
    "ImagePart",
    "MalformedResponse",
    "Message",
    "MockBackend",
    "MockRule",
    "RateLimited",
    "ResponseCache",
    "TextPart",
    "TransportError",
    "cache_key",
    "chat_key",
    "embed_key",
    "hash_to_sphere",
    "make_backend",
    "mock_backend",
]
