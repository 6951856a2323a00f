from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np


class BackendError(Exception):
    pass


class TransportError(BackendError):
    """Network-level failure that survived all retries."""


class RateLimited(TransportError):
    pass


class MalformedResponse(BackendError):
    pass


class EmbeddingDimensionError(BackendError):
    pass


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    ref: str


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple[Part, ...]

    def text(self) -> str:
        return "".join(p.text if isinstance(p, TextPart) else f"<image:{p.ref}>" for p in self.parts)


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Message, ...]
    model_id: str = "default"
    max_tokens: int = 512
    temperature: float = 0.0
    # Routing hints (stage, question id, subject) for logging and scripted backends.
    # Not sent over the wire, but part of the cache key.
    metadata: dict = field(default_factory=dict, hash=False)

    @classmethod
    def user(cls, parts: Iterable[str | Part], **kwargs) -> "ChatRequest":
        norm = tuple(TextPart(p) if isinstance(p, str) else p for p in parts)
        return cls(messages=(Message("user", norm),), **kwargs)

    def text(self) -> str:
        """Prompt text with images rendered as ``<image:ref>`` placeholders."""
        return "\n".join(m.text() for m in self.messages)

    def image_refs(self) -> list[str]:
        return [p.ref for m in self.messages for p in m.parts if isinstance(p, ImagePart)]

    def canonical(self) -> dict:
        return {
            "model_id": self.model_id,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "metadata": {k: self.metadata[k] for k in sorted(self.metadata)},
            "messages": [
                {
                    "role": m.role,
                    "parts": [
                        {"text": p.text} if isinstance(p, TextPart) else {"image": p.ref} for p in m.parts
                    ],
                }
                for m in self.messages
            ],
        }

    def validate(self) -> None:
        if not self.messages:
            raise ValueError("chat request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: dict = field(default_factory=dict, hash=False)
    cached: bool = False


@dataclass(frozen=True)
class EmbeddingRequest:
    kind: str  # "text" | "image"
    payload: str
    model_id: str = "default"

    def validate(self) -> None:
        if self.kind not in ("text", "image"):
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        if not self.payload:
            raise ValueError("embedding payload must be nonempty")


class Backend:
    """Common surface for chat + embedding services.

    Subclasses implement ``_chat`` and ``_embed``; the public methods validate
    requests, count calls and enforce a constant embedding dimension per model.
    """

    name = "backend"
    chat_model = "default"
    embed_model = "default"

    def __init__(self) -> None:
        self.calls: Counter = Counter()
        self._lock = threading.Lock()
        self._dims: dict[str, int] = {}

    def chat(self, req: ChatRequest) -> ChatResponse:
        req.validate()
        with self._lock:
            self.calls["chat"] += 1
        return self._chat(req)

    def embed(self, req: EmbeddingRequest) -> np.ndarray:
        req.validate()
        with self._lock:
            self.calls["embed"] += 1
        vec = np.asarray(self._embed(req), dtype=np.float64)
        self._check_dim(req.model_id, vec)
        return vec

    def embed_many(self, reqs: Sequence[EmbeddingRequest]) -> list[np.ndarray]:
        return [self.embed(r) for r in reqs]

    def embed_text(self, text: str) -> np.ndarray:
        return self.embed(EmbeddingRequest("text", text, self.embed_model))

    def embed_image(self, ref: str) -> np.ndarray:
        return self.embed(EmbeddingRequest("image", ref, self.embed_model))

    def _check_dim(self, model_id: str, vec: np.ndarray) -> None:
        if vec.ndim != 1:
            raise EmbeddingDimensionError(f"embedding for {model_id!r} is not a vector (shape {vec.shape})")
        with self._lock:
            known = self._dims.setdefault(model_id, vec.shape[0])
        if known != vec.shape[0]:
            raise EmbeddingDimensionError(f"model {model_id!r} returned dimension {vec.shape[0]}, earlier {known}")

    def _chat(self, req: ChatRequest) -> ChatResponse:  # pragma: no cover - abstract
        raise NotImplementedError

    def _embed(self, req: EmbeddingRequest) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError


def normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise BackendError("cannot normalise a zero vector")
    return vec / norm
