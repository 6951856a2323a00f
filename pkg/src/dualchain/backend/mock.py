"""Deterministic offline backend.

Embeddings hash ``(seed, payload)`` onto the unit sphere. Image refs listed in
``image_labels`` instead embed as the normalised sum of their labels' text
vectors plus a small seeded noise vector, which is how synthetic corpora plant
retrievable content.

Chat responses are resolved in this order:

1. the first matching :class:`MockRule`;
2. an ``#ECHO:<text>`` marker anywhere in the prompt (returns ``<text>``);
3. stage behaviours keyed on ``metadata["stage"]``: ``describe_event`` and
   ``describe_character`` report the planted ``visual_facts`` of the attached
   frames for the requested subject, ``aggregate`` concatenates the tagged
   event and character blocks in the prompt;
4. a fixed template echoing the prompt's most frequent keywords.
"""

from __future__ import annotations

import hashlib
import html
import re
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .types import Backend, ChatRequest, ChatResponse, EmbeddingRequest, normalize

DEFAULT_DIM = 512

_ECHO = re.compile(r"#ECHO:([^\n]*)")
_EVENT_TAG = re.compile(r"<event\b[^>]*>(.*?)</event>", re.S)
_CHAR_TAG = re.compile(r'<character name="([^"]*)"[^>]*>(.*?)</character>', re.S)
_WORD = re.compile(r"[A-Za-z][A-Za-z'-]{3,}")
_STOP = frozenset(
    "that this with from what which when where were have been will would could should "
    "into your their there them they then than also about answer question following "
    "option options frames frame video episode only given based".split()
)


def hash_to_sphere(seed: int, payload: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x00{payload}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
    return normalize(rng.standard_normal(dim))


@dataclass(frozen=True)
class MockRule:
    """Scripted reply. Every populated matcher must hold for the rule to fire."""

    response: str
    stage: str | None = None
    question_id: str | None = None
    contains: tuple[str, ...] = ()
    pattern: str | None = None

    def matches(self, req: ChatRequest, text: str) -> bool:
        meta = req.metadata
        if self.stage is not None and meta.get("stage") != self.stage:
            return False
        if self.question_id is not None and meta.get("question_id") != self.question_id:
            return False
        if any(s not in text for s in self.contains):
            return False
        if self.pattern is not None and not re.search(self.pattern, text):
            return False
        return True

    def to_dict(self) -> dict:
        return {
            "response": self.response,
            "stage": self.stage,
            "question_id": self.question_id,
            "contains": list(self.contains),
            "pattern": self.pattern,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MockRule":
        return cls(d["response"], d.get("stage"), d.get("question_id"), tuple(d.get("contains", ())), d.get("pattern"))


def _keywords(text: str, k: int = 5) -> list[str]:
    counts: Counter = Counter()
    first: dict[str, int] = {}
    for i, m in enumerate(_WORD.finditer(text)):
        w = m.group(0).lower()
        if w in _STOP:
            continue
        counts[w] += 1
        first.setdefault(w, i)
    return sorted(counts, key=lambda w: (-counts[w], first[w]))[:k]


class MockBackend(Backend):
    name = "mock"
    chat_model = "mock-chat"
    embed_model = "mock-embed"

    def __init__(
        self,
        seed: int = 0,
        *,
        dim: int = DEFAULT_DIM,
        rules: Sequence[MockRule] = (),
        image_labels: Mapping[str, Sequence[str]] | None = None,
        visual_facts: Mapping[str, Sequence[tuple[str, str]]] | None = None,
        vectors: Mapping[str, Sequence[float]] | None = None,
        noise: float = 0.1,
    ):
        super().__init__()
        self.seed = seed
        self.dim = dim
        self.rules = list(rules)
        self.image_labels = {k: list(v) for k, v in (image_labels or {}).items()}
        self.visual_facts = {k: [tuple(x) for x in v] for k, v in (visual_facts or {}).items()}
        self.vectors = {k: np.asarray(v, dtype=np.float64) for k, v in (vectors or {}).items()}
        self.noise = noise

    # ------------------------------------------------------------------ embeddings

    def text_vector(self, text: str) -> np.ndarray:
        if text in self.vectors:
            return self.vectors[text]
        return hash_to_sphere(self.seed, "text:" + text, self.dim)

    def _embed(self, req: EmbeddingRequest) -> np.ndarray:
        if req.kind == "text":
            return self.text_vector(req.payload)
        labels = self.image_labels.get(req.payload)
        if not labels:
            return hash_to_sphere(self.seed, "image:" + req.payload, self.dim)
        acc = np.zeros(self.dim)
        for label in labels:
            acc += self.text_vector(label)
        acc += self.noise * hash_to_sphere(self.seed, "noise:" + req.payload, self.dim)
        return normalize(acc)

    # ------------------------------------------------------------------ chat

    def _facts(self, refs: Sequence[str], subject: str) -> list[str]:
        out: list[str] = []
        for ref in refs:
            for subj, sentence in self.visual_facts.get(ref, ()):
                if subj == subject and sentence not in out:
                    out.append(sentence)
        return out

    def _respond(self, req: ChatRequest, text: str) -> str:
        for rule in self.rules:
            if rule.matches(req, text):
                return rule.response
        m = _ECHO.search(text)
        if m:
            return m.group(1).strip()
        stage = req.metadata.get("stage")
        subject = req.metadata.get("subject", "")
        if stage == "describe_event":
            facts = self._facts(req.image_refs(), subject)
            return " ".join(facts) if facts else f"The frames show {subject} with no further detail."
        if stage == "describe_character":
            facts = self._facts(req.image_refs(), subject)
            return " ".join(facts) if facts else f"{subject} appears without notable behaviour."
        if stage == "aggregate":
            events = [html.unescape(e.strip()) for e in _EVENT_TAG.findall(text)]
            chars = [(html.unescape(n), html.unescape(d.strip())) for n, d in _CHAR_TAG.findall(text)]
            out = " ".join(events)
            if chars:
                out += " Characters involved: " + " ".join(f"{n}: {d}" for n, d in chars)
            return out.strip()
        return "[mock] keywords: " + ", ".join(_keywords(text))

    def _chat(self, req: ChatRequest) -> ChatResponse:
        text = req.text()
        reply = self._respond(req, text)
        usage = {"prompt_tokens": len(text.split()), "completion_tokens": len(reply.split())}
        return ChatResponse(reply, usage)


def mock_backend(seed: int = 0, **kwargs) -> MockBackend:
    return MockBackend(seed, **kwargs)
