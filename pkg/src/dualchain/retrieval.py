"""Frame retrieval for events and characters.

Events: frames scoring at least ``theta_e`` against the event text seed a
segment; every frame within ``delta`` sequence positions of a seed joins it,
and each maximal run of the resulting set becomes one :class:`EventSegment`.

Characters: frames scoring at least ``theta_c`` form the character's track
as-is, with no windowing, since appearances are typically scattered.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .backend import Backend
from .datamodel import CharacterProfile, FrameSequence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetrievalConfig:
    theta_e: float = 0.25
    theta_c: float = 0.25
    delta: int = 2
    min_segment_len: int = 1

    def __post_init__(self):
        for name in ("theta_e", "theta_c"):
            val = getattr(self, name)
            if not -1.0 <= val <= 1.0:
                raise ValueError(f"{name}={val} outside the cosine range [-1, 1]")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.min_segment_len < 1:
            raise ValueError("min_segment_len must be >= 1")


@dataclass(frozen=True)
class EventSegment:
    event_id: str
    event: str
    frame_indices: tuple[int, ...]
    interval: tuple[float, float]
    seed_indices: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "event": self.event,
            "frame_indices": list(self.frame_indices),
            "interval": list(self.interval),
            "seed_indices": list(self.seed_indices),
        }


@dataclass(frozen=True)
class CharacterTrack:
    character: str
    frame_indices: tuple[int, ...]
    appearance_times: tuple[float, ...]

    def to_dict(self) -> dict:
        return {
            "character": self.character,
            "frame_indices": list(self.frame_indices),
            "appearance_times": list(self.appearance_times),
        }


def cosine_similarity(u: Sequence[float], v: Sequence[float]) -> float:
    a = np.asarray(u, dtype=np.float64)
    b = np.asarray(v, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero embedding vector")
    return m / norms


def embed_frames(frames: FrameSequence, backend: Backend, max_workers: int = 1) -> np.ndarray:
    """Image embeddings for every frame, one row per sequence position."""
    refs = [f.image_ref for f in frames]
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            rows = list(pool.map(backend.embed_image, refs))
    else:
        rows = [backend.embed_image(r) for r in refs]
    return _unit_rows(np.vstack(rows))


def event_score_matrix(frame_emb: np.ndarray, event_texts: Sequence[str], backend: Backend) -> np.ndarray:
    """Cosine scores, shape (events, frames)."""
    if not len(event_texts):
        return np.zeros((0, frame_emb.shape[0]))
    text_emb = _unit_rows(np.vstack([backend.embed_text(t) for t in event_texts]))
    return np.clip(text_emb @ frame_emb.T, -1.0, 1.0)


def character_score_matrix(frame_emb: np.ndarray, profiles: Sequence[CharacterProfile], backend: Backend) -> np.ndarray:
    """Per character, the max of the name-text score and the portrait-image score."""
    rows = []
    for prof in profiles:
        score = frame_emb @ _unit_rows(backend.embed_text(prof.name)[None, :])[0]
        if prof.portrait_ref:
            portrait = _unit_rows(backend.embed_image(prof.portrait_ref)[None, :])[0]
            score = np.maximum(score, frame_emb @ portrait)
        rows.append(score)
    if not rows:
        return np.zeros((0, frame_emb.shape[0]))
    return np.clip(np.vstack(rows), -1.0, 1.0)


def window_closure(seeds: Iterable[int], delta: int, n: int) -> np.ndarray:
    """Boolean mask over positions ``0..n-1`` within ``delta`` of any seed."""
    seeds = np.asarray(sorted(set(int(s) for s in seeds)), dtype=np.int64)
    mask_diff = np.zeros(n + 1, dtype=np.int64)
    if seeds.size:
        np.add.at(mask_diff, np.clip(seeds - delta, 0, n), 1)
        np.add.at(mask_diff, np.clip(seeds + delta + 1, 0, n), -1)
    return np.cumsum(mask_diff[:n]) > 0


def maximal_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive ``(start, end)`` position pairs of each run of True."""
    padded = np.concatenate(([False], np.asarray(mask, dtype=bool), [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [(int(s), int(e) - 1) for s, e in zip(edges[::2], edges[1::2])]


def segments_from_scores(
    scores: np.ndarray,
    frames: FrameSequence,
    cfg: RetrievalConfig,
    event_id: str,
    event: str = "",
) -> list[EventSegment]:
    scores = np.asarray(scores)
    if scores.shape != (len(frames),):
        raise ValueError(f"expected {len(frames)} scores, got shape {scores.shape}")
    seeds = np.flatnonzero(scores >= cfg.theta_e)
    if not seeds.size:
        return []
    mask = window_closure(seeds, cfg.delta, len(frames))
    seed_set = set(seeds.tolist())
    idx = frames.indices
    ts = frames.timestamps
    out = []
    for start, end in maximal_runs(mask):
        if end - start + 1 < cfg.min_segment_len:
            continue
        out.append(
            EventSegment(
                event_id=event_id,
                event=event,
                frame_indices=tuple(idx[start : end + 1]),
                interval=(ts[start], ts[end]),
                seed_indices=tuple(idx[p] for p in range(start, end + 1) if p in seed_set),
            )
        )
    return out


def build_event_segments(
    frames: FrameSequence,
    event_texts: Sequence[str],
    cfg: RetrievalConfig,
    backend: Backend,
    *,
    frame_emb: np.ndarray | None = None,
    scores: np.ndarray | None = None,
) -> list[list[EventSegment]]:
    """One (possibly empty) list of segments per event, in event order."""
    if not len(frames):
        raise ValueError("frame sequence is empty")
    if not event_texts:
        raise ValueError("no events to retrieve")
    if scores is None:
        if frame_emb is None:
            frame_emb = embed_frames(frames, backend)
        scores = event_score_matrix(frame_emb, event_texts, backend)
    return [
        segments_from_scores(scores[j], frames, cfg, f"E{j + 1}", text)
        for j, text in enumerate(event_texts)
    ]


def build_character_tracks(
    frames: FrameSequence,
    profiles: Sequence[CharacterProfile],
    cfg: RetrievalConfig,
    backend: Backend,
    *,
    frame_emb: np.ndarray | None = None,
    scores: np.ndarray | None = None,
) -> list[CharacterTrack]:
    if not profiles:
        raise ValueError("no characters to track")
    if scores is None:
        if frame_emb is None:
            frame_emb = embed_frames(frames, backend)
        scores = character_score_matrix(frame_emb, profiles, backend)
    idx = frames.indices
    ts = frames.timestamps
    tracks = []
    for prof, row in zip(profiles, scores):
        hits = np.flatnonzero(np.asarray(row) >= cfg.theta_c).tolist()
        if not hits:
            log.info("character %r matched no frame", prof.name)
        tracks.append(CharacterTrack(prof.name, tuple(idx[p] for p in hits), tuple(ts[p] for p in hits)))
    return tracks


def retrieval_dump(
    frames: FrameSequence,
    event_texts: Sequence[str],
    event_scores: np.ndarray | None,
    segments: Sequence[Sequence[EventSegment]],
    profiles: Sequence[CharacterProfile],
    char_scores: np.ndarray | None,
    tracks: Sequence[CharacterTrack],
) -> dict:
    """JSON-ready snapshot of similarity scores and retrieval outputs."""

    def rows(m):
        return [] if m is None else [[round(float(x), 6) for x in r] for r in m]

    return {
        "frame_indices": frames.indices,
        "events": list(event_texts),
        "event_scores": rows(event_scores),
        "segments": [[s.to_dict() for s in segs] for segs in segments],
        "characters": [p.name for p in profiles],
        "character_scores": rows(char_scores),
        "tracks": [t.to_dict() for t in tracks],
    }
