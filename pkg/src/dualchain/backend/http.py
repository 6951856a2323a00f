"""Chat-completions style JSON-over-HTTP client.

Request and response bodies are documented in ``docs/wire_protocol.md``.
"""

from __future__ import annotations

import base64
import logging
import mimetypes
import threading
import time
from pathlib import Path
from typing import Callable

import httpx
import numpy as np

from ..datamodel import STUB_PREFIX
from .types import (
    Backend,
    BackendError,
    ChatRequest,
    ChatResponse,
    EmbeddingRequest,
    ImagePart,
    MalformedResponse,
    RateLimited,
    TextPart,
    TransportError,
    normalize,
)

log = logging.getLogger(__name__)

RETRY_STATUS = frozenset({429, 500, 502, 503, 504})


def image_data_url(ref: str, root: Path | None) -> str:
    if ref.startswith(STUB_PREFIX):
        raise BackendError(f"stub image {ref!r} has no content to send")
    path = Path(ref)
    if not path.is_absolute() and root is not None:
        path = root / path
    if not path.exists():
        raise BackendError(f"image {ref!r} not found")
    mime = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
    return f"data:{mime};base64," + base64.b64encode(path.read_bytes()).decode("ascii")


class HTTPBackend(Backend):
    name = "http"

    def __init__(
        self,
        endpoint: str,
        *,
        api_key: str | None = None,
        chat_model: str = "default",
        embed_model: str = "default",
        timeout_s: float = 60.0,
        retries: int = 3,
        backoff_s: float = 0.5,
        max_in_flight: int = 8,
        image_root: str | Path | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        super().__init__()
        self.endpoint = endpoint.rstrip("/")
        self.chat_model = chat_model
        self.embed_model = embed_model
        self.retries = max(1, retries)
        self.backoff_s = backoff_s
        self.image_root = Path(image_root) if image_root else None
        self._sleep = sleep
        self._limiter = threading.BoundedSemaphore(max_in_flight)
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=timeout_s, headers=headers, transport=transport)

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, body: dict) -> dict:
        url = f"{self.endpoint}{path}"
        last: Exception | None = None
        for attempt in range(self.retries):
            if attempt:
                self._sleep(self.backoff_s * 2 ** (attempt - 1))
            try:
                with self._limiter:
                    resp = self._client.post(url, json=body)
            except httpx.TransportError as exc:
                last = TransportError(f"POST {url}: {exc}")
                log.warning("transport failure (attempt %d/%d): %s", attempt + 1, self.retries, exc)
                continue
            if resp.status_code in RETRY_STATUS:
                cls = RateLimited if resp.status_code == 429 else TransportError
                last = cls(f"POST {url}: HTTP {resp.status_code}")
                log.warning("HTTP %d (attempt %d/%d)", resp.status_code, attempt + 1, self.retries)
                continue
            if resp.status_code >= 400:
                raise BackendError(f"POST {url}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError:
                raise MalformedResponse(f"POST {url}: body is not JSON") from None
        assert last is not None
        raise last

    def chat_body(self, req: ChatRequest) -> dict:
        messages = []
        for m in req.messages:
            content = []
            for p in m.parts:
                if isinstance(p, TextPart):
                    content.append({"type": "text", "text": p.text})
                elif isinstance(p, ImagePart):
                    content.append({"type": "image_url", "image_url": {"url": image_data_url(p.ref, self.image_root)}})
            messages.append({"role": m.role, "content": content})
        model = self.chat_model if req.model_id == "default" else req.model_id
        return {"model": model, "messages": messages, "max_tokens": req.max_tokens, "temperature": req.temperature}

    def _chat(self, req: ChatRequest) -> ChatResponse:
        data = self._post("/chat/completions", self.chat_body(req))
        try:
            content = data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise MalformedResponse("response lacks choices[0].message.content") from None
        if isinstance(content, list):
            content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
        if not isinstance(content, str):
            raise MalformedResponse("message content is not text")
        return ChatResponse(content, dict(data.get("usage") or {}))

    def _embed(self, req: EmbeddingRequest) -> np.ndarray:
        payload = req.payload if req.kind == "text" else image_data_url(req.payload, self.image_root)
        model = self.embed_model if req.model_id == "default" else req.model_id
        body = {"model": model, "input": [payload], "input_type": req.kind, "encoding_format": "float"}
        data = self._post("/embeddings", body)
        try:
            vec = np.asarray(data["data"][0]["embedding"], dtype=np.float64)
        except (KeyError, IndexError, TypeError, ValueError):
            raise MalformedResponse("response lacks data[0].embedding") from None
        return normalize(vec)
