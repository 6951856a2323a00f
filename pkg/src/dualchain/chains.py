"""Plot & Character Dual Chain of Thought.

Pipeline per question:

1. ``extract_targets`` asks the model which events and characters matter;
2. retrieval finds each event's frame segments and each character's frames;
3. ``build_plot_event_chain`` / ``build_character_temporal_chain`` describe them;
4. ``synthesize_dual_chain`` attaches every character whose appearances fall
   inside an event interval to that event, merges the descriptions and asks
   the final question.

Missing pieces degrade step by step (dual -> single chain -> plain prompt) and
every degradation is flagged on the record.
"""

from __future__ import annotations

import json
import logging
import re
import time
from bisect import bisect_left
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, TypeVar

from .assembly import assemble_prompt, context_parts
from .backend import Backend, BackendError, ChatRequest, TextPart
from .datamodel import CharacterProfile, Episode, Question, Series, SeriesCorpus
from .prompting import (
    PromptTemplates,
    character_block,
    event_block,
    fmt_time,
    format_hint,
    frame_parts,
    render_question,
    section,
    uniform_positions,
)
from .records import EvalRecord
from .retrieval import (
    CharacterTrack,
    EventSegment,
    build_character_tracks,
    build_event_segments,
    character_score_matrix,
    embed_frames,
    event_score_matrix,
    retrieval_dump,
)
from .runspec import PipelineConfig, RunSpec

log = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class ExtractionFailed(Exception):
    def __init__(self, raw: str, reason: str = "unparseable extraction output"):
        super().__init__(reason)
        self.raw = raw


@dataclass
class ExtractionResult:
    events: list[str]
    characters: list[str]
    unresolved: list[str] = field(default_factory=list)
    raw: str = ""

    def to_dict(self) -> dict:
        return {"events": self.events, "characters": self.characters, "unresolved": self.unresolved, "raw": self.raw}


@dataclass(frozen=True)
class EventChainNode:
    event_id: str
    event: str
    description: str
    interval: tuple[float, float]
    source_frames: tuple[int, ...]

    def __post_init__(self):
        if self.interval[0] > self.interval[1]:
            raise ValueError(f"interval {self.interval} is not well-ordered")

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "event": self.event,
            "description": self.description,
            "interval": list(self.interval),
            "source_frames": list(self.source_frames),
        }


@dataclass(frozen=True)
class CharacterChainNode:
    character: str
    description: str
    appearance_times: tuple[float, ...]
    source_frames: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "character": self.character,
            "description": self.description,
            "appearance_times": list(self.appearance_times),
            "source_frames": list(self.source_frames),
        }


@dataclass
class SynthesisNode:
    event: EventChainNode
    characters: list[str]
    description: str

    def to_dict(self) -> dict:
        return {"event_id": self.event.event_id, "characters": self.characters, "description": self.description}


@dataclass
class DualChainResult:
    nodes: list[SynthesisNode]
    final_answer: str
    mode: str  # dual | event_only | character_only | plain
    participation: list[list[bool]]
    prompt: str
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "nodes": [n.to_dict() for n in self.nodes],
            "participation": self.participation,
            "prompt": self.prompt,
            "final_answer": self.final_answer,
            "flags": self.flags,
        }


# ---------------------------------------------------------------- helpers


def _map(fn: Callable[[T], R], items: Sequence[T], max_workers: int) -> list[R]:
    if max_workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(min(max_workers, len(items))) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _chat_text(backend: Backend, req: ChatRequest, retries: int) -> str:
    """Chat with node-level retry; empty replies count as failures."""
    last: Exception | None = None
    for _ in range(retries + 1):
        try:
            text = backend.chat(req).text.strip()
        except BackendError as exc:
            last = exc
            continue
        if text:
            return text
        last = BackendError("empty response")
    raise last  # type: ignore[misc]


def _request(parts: list, cfg: PipelineConfig, stage: str, question_id: str | None, subject: str | None = None) -> ChatRequest:
    meta = {"stage": stage}
    if question_id is not None:
        meta["question_id"] = question_id
    if subject is not None:
        meta["subject"] = subject
    return ChatRequest.user(parts, max_tokens=cfg.max_tokens, temperature=cfg.temperature, metadata=meta)


def _sample(frame_indices: Sequence[int], episode: Episode, cap: int) -> list[int]:
    """Sequence positions of up to ``cap`` uniformly spread frames."""
    positions = [episode.frames.position_of(i) for i in frame_indices]
    return [positions[p] for p in uniform_positions(len(positions), cap)]


# ---------------------------------------------------------------- extraction

_HEADER = re.compile(
    r"^\s*[#*_\s]*(events?|plot events?|key events?|characters?|key characters?|事件|情节|人物|角色)[*_\s]*[:：]\s*(.*)$",
    re.I,
)
_BULLET = re.compile(r"^\s*(?:\(?\d+[.)、]|[-*•·])\s*")
_INLINE_ENUM = re.compile(r"\s+(?=\d+[.)]\s)")
_NAME_SPLIT = re.compile(r"\s*(?:[,;，、；]|\band\b)\s*")
_NONE = {"", "none", "n/a", "na", "-", "无", "nothing", "no events", "no characters"}


def _clean(item: str) -> str:
    item = _BULLET.sub("", item).strip().strip("*_\"'`").strip()
    return item.rstrip(".。").strip()


def _dedup(items) -> list[str]:
    seen: set[str] = set()
    out = []
    for it in items:
        key = it.casefold()
        if it and key not in _NONE and key not in seen:
            seen.add(key)
            out.append(it)
    return out


def _parse_json(raw: str) -> tuple[list[str], list[str]] | None:
    m = re.search(r"\{.*\}", raw, re.S)
    if not m:
        return None
    try:
        obj = json.loads(m.group(0))
    except json.JSONDecodeError:
        return None
    if not isinstance(obj, dict):
        return None
    keys = {k.lower(): v for k, v in obj.items()}
    if "events" not in keys and "characters" not in keys:
        return None

    def as_list(v):
        if isinstance(v, str):
            return [v]
        return [str(x) for x in v] if isinstance(v, list) else []

    return as_list(keys.get("events", [])), as_list(keys.get("characters", []))


def parse_extraction(raw: str, character_names: Sequence[str] = ()) -> ExtractionResult:
    """Tolerant parse of ``Events:`` / ``Characters:`` output.

    Accepts enumerated or bulleted lists, inline lists after the header and a
    JSON object as a fallback. Character names are matched case-insensitively
    against ``character_names``; unmatched names are kept verbatim and listed
    in ``unresolved``.
    """
    events: list[str] = []
    chars: list[str] = []
    current = None
    found = False
    for line in raw.splitlines():
        m = _HEADER.match(line)
        if m:
            found = True
            head = m.group(1).lower()
            current = "events" if head.startswith(("event", "plot", "key event", "事件", "情节")) else "characters"
            rest = m.group(2).strip()
            if rest:
                if current == "events":
                    events.extend(_clean(x) for x in _INLINE_ENUM.split(rest))
                else:
                    chars.extend(_clean(x) for x in _NAME_SPLIT.split(rest))
            continue
        if current is None or not line.strip():
            continue
        item = _clean(line)
        if current == "events":
            events.append(item)
        else:
            chars.extend(_clean(x) for x in _NAME_SPLIT.split(item))
    if not found:
        parsed = _parse_json(raw)
        if parsed is None:
            raise ExtractionFailed(raw)
        events = [_clean(x) for x in parsed[0]]
        chars = [_clean(x) for x in parsed[1]]

    canon = {n.casefold(): n for n in character_names}
    resolved, unresolved = [], []
    for name in _dedup(chars):
        if name.casefold() in canon:
            resolved.append(canon[name.casefold()])
        else:
            resolved.append(name)
            unresolved.append(name)
    return ExtractionResult(_dedup(events), _dedup(resolved), unresolved, raw)


def extract_targets(
    question: Question,
    episode: Episode,
    series: Series,
    backend: Backend,
    cfg: PipelineConfig | None = None,
    templates: PromptTemplates | None = None,
) -> ExtractionResult:
    cfg = cfg or PipelineConfig()
    templates = templates or PromptTemplates()
    names = [p.name for p in series.character_sheet]
    positions = uniform_positions(len(episode.frames), cfg.extract_frames)
    parts: list = frame_parts([episode], [positions], False) if positions else []
    parts.append(
        TextPart(
            templates.render(
                "extract",
                question=render_question(question),
                character_names=", ".join(names) if names else "(none listed)",
            )
        )
    )
    raw = _chat_text(backend, _request(parts, cfg, "extract", question.id), cfg.node_retries)
    return parse_extraction(raw, names)


def resolve_profiles(extraction: ExtractionResult, series: Series) -> list[CharacterProfile]:
    """Sheet profiles for extracted names in sheet order, then unresolved names."""
    wanted = {n.casefold() for n in extraction.characters}
    out = [p for p in series.character_sheet if p.name.casefold() in wanted]
    out.extend(CharacterProfile(n) for n in extraction.unresolved)
    return out


# ---------------------------------------------------------------- chains


def build_plot_event_chain(
    segments: Sequence[Sequence[EventSegment]] | Sequence[EventSegment],
    episode: Episode,
    backend: Backend,
    cfg: PipelineConfig | None = None,
    templates: PromptTemplates | None = None,
    question_id: str | None = None,
) -> list[EventChainNode]:
    """One node per nonempty segment, ordered by start time."""
    cfg = cfg or PipelineConfig()
    templates = templates or PromptTemplates()
    groups = [[s] if isinstance(s, EventSegment) else list(s) for s in segments]
    flat: list[tuple[str, EventSegment]] = []
    for group in groups:
        group = [s for s in group if s.frame_indices]
        for k, seg in enumerate(group, start=1):
            node_id = seg.event_id if len(group) == 1 else f"{seg.event_id}.{k}"
            flat.append((node_id, seg))
    flat.sort(key=lambda x: (x[1].interval[0], x[1].interval[1]))

    def describe(item: tuple[str, EventSegment]) -> EventChainNode:
        node_id, seg = item
        parts = frame_parts([episode], [_sample(seg.frame_indices, episode, cfg.frames_per_node)], False)
        start, end = seg.interval
        parts.append(TextPart(templates.render("describe_event", start=fmt_time(start), end=fmt_time(end), event=seg.event)))
        req = _request(parts, cfg, "describe_event", question_id, seg.event)
        text = _chat_text(backend, req, cfg.node_retries)
        return EventChainNode(node_id, seg.event, text, seg.interval, seg.frame_indices)

    return _map(describe, flat, cfg.max_workers)


def build_character_temporal_chain(
    tracks: Sequence[CharacterTrack],
    episode: Episode,
    backend: Backend,
    cfg: PipelineConfig | None = None,
    templates: PromptTemplates | None = None,
    question_id: str | None = None,
    profiles: Sequence[CharacterProfile] = (),
) -> list[CharacterChainNode]:
    """One node per nonempty track, in track order."""
    cfg = cfg or PipelineConfig()
    templates = templates or PromptTemplates()
    by_name = {p.name: p for p in profiles}
    live = []
    for tr in tracks:
        if tr.frame_indices:
            live.append(tr)
        else:
            log.info("no frames retrieved for %r; character node skipped", tr.character)

    def describe(tr: CharacterTrack) -> CharacterChainNode:
        parts = frame_parts([episode], [_sample(tr.frame_indices, episode, cfg.frames_per_node)], False)
        prof = by_name.get(tr.character)
        profile = f"Profile: {prof.description}" if prof and prof.description else ""
        times = ", ".join(fmt_time(t) for t in tr.appearance_times)
        parts.append(TextPart(templates.render("describe_character", character=tr.character, times=times, profile=profile)))
        req = _request(parts, cfg, "describe_character", question_id, tr.character)
        text = _chat_text(backend, req, cfg.node_retries)
        return CharacterChainNode(tr.character, text, tuple(sorted(tr.appearance_times)), tr.frame_indices)

    return _map(describe, live, cfg.max_workers)


# ---------------------------------------------------------------- synthesis


def participates(interval: tuple[float, float], times: Sequence[float]) -> bool:
    """True iff some sorted appearance time lies in the closed interval."""
    start, end = interval
    i = bisect_left(times, start)
    return i < len(times) and times[i] <= end


def participation_matrix(events: Sequence[EventChainNode], characters: Sequence[CharacterChainNode]) -> list[list[bool]]:
    sorted_times = [sorted(c.appearance_times) for c in characters]
    return [[participates(e.interval, ts) for ts in sorted_times] for e in events]


def _plain_request(question: Question, templates: PromptTemplates, cfg: PipelineConfig, context: Sequence) -> ChatRequest:
    parts = list(context)
    parts.append(TextPart(section("prompt", templates.render("evaluate", format_hint=format_hint(question)))))
    parts.append(TextPart(section("question", render_question(question))))
    return _request(parts, cfg, "answer", question.id)


_BATCH_ID = re.compile(r"\[(E\d+(?:\.\d+)?)\]")


def _split_batched(text: str, ids: Sequence[str]) -> dict[str, str]:
    pieces = _BATCH_ID.split(text)
    out = {}
    for node_id, body in zip(pieces[1::2], pieces[2::2]):
        if node_id in ids and body.strip():
            out[node_id] = body.strip()
    return out


def synthesize_dual_chain(
    events: Sequence[EventChainNode],
    characters: Sequence[CharacterChainNode],
    question: Question,
    backend: Backend,
    cfg: PipelineConfig | None = None,
    templates: PromptTemplates | None = None,
    context: Sequence = (),
    fallback: ChatRequest | None = None,
) -> DualChainResult:
    """Attach characters to events by interval overlap, merge, and answer.

    ``context`` holds optional subtitle/theme parts placed before the chains.
    With only one chain available the merge step is skipped and that chain
    alone is shown; with neither, ``fallback`` (or a minimal plain prompt) is
    asked instead.
    """
    cfg = cfg or PipelineConfig()
    templates = templates or PromptTemplates()
    events = list(events)
    characters = list(characters)
    matrix = participation_matrix(events, characters)
    flags: list[str] = []

    if not events and not characters:
        req = fallback or _plain_request(question, templates, cfg, context)
        answer = _chat_text(backend, req, cfg.node_retries)
        return DualChainResult([], answer, "plain", matrix, req.text(), ["fallback_plain"])

    nodes: list[SynthesisNode] = []
    for j, ev in enumerate(events):
        names = [characters[k].character for k in range(len(characters)) if matrix[j][k]]
        nodes.append(SynthesisNode(ev, names, ev.description))

    if events and characters:
        mode = "dual"
        blocks = []
        for j, node in enumerate(nodes):
            eb = event_block(node.event.event_id, node.event.interval, node.event.description)
            cbs = [character_block(c.character, c.appearance_times, c.description) for k, c in enumerate(characters) if matrix[j][k]]
            blocks.append((eb, "\n".join(cbs) if cbs else "(no character appears within this interval)"))
        if cfg.aggregation == "batched":
            body = "\n\n".join(f"{eb}\n{cb}" for eb, cb in blocks)
            req = _request([TextPart(templates.render("aggregate_batched", blocks=body))], cfg, "aggregate", question.id, "batched")
            text = _chat_text(backend, req, cfg.node_retries)
            split = _split_batched(text, [n.event.event_id for n in nodes])
            if len(split) < len(nodes):
                flags.append("batched_parse_partial")
            for node in nodes:
                node.description = split.get(node.event.event_id, text)
        else:

            def merge(j: int) -> str:
                eb, cb = blocks[j]
                req = _request(
                    [TextPart(templates.render("aggregate", event_block=eb, character_block=cb))],
                    cfg,
                    "aggregate",
                    question.id,
                    nodes[j].event.event_id,
                )
                return _chat_text(backend, req, cfg.node_retries)

            for node, text in zip(nodes, _map(merge, range(len(nodes)), cfg.max_workers)):
                node.description = text
    elif events:
        mode = "event_only"
    else:
        mode = "character_only"

    parts = list(context)
    if events:
        body = "\n".join(event_block(e.event_id, e.interval, e.description) for e in events)
        parts.append(TextPart(section("plot-event-chain", body)))
    if characters:
        body = "\n".join(character_block(c.character, c.appearance_times, c.description) for c in characters)
        parts.append(TextPart(section("character-temporal-chain", body)))
    if mode == "dual":
        body = "\n".join(
            f'<synthesis event="{n.event.event_id}" characters="{", ".join(n.characters)}">{n.description}</synthesis>'
            for n in nodes
        )
        parts.append(TextPart(section("dual-chain", body)))
    parts.append(TextPart(section("prompt", templates.render("pcdcot_answer", format_hint=format_hint(question)))))
    parts.append(TextPart(section("question", render_question(question))))
    req = _request(parts, cfg, "answer", question.id)
    answer = _chat_text(backend, req, cfg.node_retries)
    return DualChainResult(nodes, answer, mode, matrix, req.text(), flags)


# ---------------------------------------------------------------- end to end


def answer_with_pcdcot(
    question: Question,
    corpus: SeriesCorpus,
    spec: RunSpec,
    backend: Backend,
    templates: PromptTemplates | None = None,
) -> EvalRecord:
    """Run the whole pipeline for one question; never raises on model failures.

    Stage artifacts land on the record in execution order. Backend failures
    are recorded with the stage they happened in.
    """
    templates = templates or PromptTemplates()
    cfg = spec.pipeline
    rec = EvalRecord(question.id, question.format)
    t0 = time.perf_counter()
    series = corpus.get_series(question.series_id)
    episode = series.episode(question.episode_index)
    context = context_parts(question, corpus, spec.modalities)
    plain = assemble_prompt(question, corpus, spec.evolve(episode_window=None), templates).request
    use_events = spec.ablation != "no_plot_event"
    use_chars = spec.ablation != "no_cha_temp"
    stage = "extract"
    try:
        try:
            extraction = extract_targets(question, episode, series, backend, cfg, templates)
        except ExtractionFailed as exc:
            rec.add_stage("extract", {"error": str(exc), "raw": exc.raw})
            rec.flags.append("extraction_failed")
            stage = "synthesis"
            result = synthesize_dual_chain([], [], question, backend, cfg, templates, context, plain)
            rec.add_stage("synthesis", result.to_dict())
            rec.flags.extend(result.flags)
            rec.raw_response = result.final_answer
            return rec
        rec.add_stage("extract", extraction.to_dict())
        if extraction.unresolved:
            rec.flags.append("unresolved_characters")
        if not extraction.events:
            rec.flags.append("no_events_extracted")
        if not extraction.characters:
            rec.flags.append("no_characters_extracted")

        event_texts = extraction.events if use_events else []
        profiles = resolve_profiles(extraction, series) if use_chars else []
        segments: list = []
        tracks: list = []
        if event_texts or profiles:
            stage = "retrieve"
            frame_emb = embed_frames(episode.frames, backend, cfg.max_workers)
            e_scores = event_score_matrix(frame_emb, event_texts, backend) if event_texts else None
            c_scores = character_score_matrix(frame_emb, profiles, backend) if profiles else None
            if event_texts:
                segments = build_event_segments(episode.frames, event_texts, cfg.retrieval, backend, scores=e_scores)
            if profiles:
                tracks = build_character_tracks(episode.frames, profiles, cfg.retrieval, backend, scores=c_scores)
            rec.add_stage("retrieve", retrieval_dump(episode.frames, event_texts, e_scores, segments, profiles, c_scores, tracks))
            if not any(segments) and not any(t.frame_indices for t in tracks):
                rec.flags.append("retrieval_empty")

        event_nodes: list[EventChainNode] = []
        char_nodes: list[CharacterChainNode] = []
        if use_events:
            stage = "plot_event_chain"
            event_nodes = build_plot_event_chain(segments, episode, backend, cfg, templates, question.id)
            rec.add_stage("plot_event_chain", [n.to_dict() for n in event_nodes])
        if use_chars:
            stage = "character_chain"
            char_nodes = build_character_temporal_chain(tracks, episode, backend, cfg, templates, question.id, profiles)
            rec.add_stage("character_chain", [n.to_dict() for n in char_nodes])

        stage = "synthesis"
        result = synthesize_dual_chain(event_nodes, char_nodes, question, backend, cfg, templates, context, plain)
        rec.add_stage("synthesis", result.to_dict())
        rec.flags.extend(result.flags)
        expected = "dual" if spec.ablation is None else ("event_only" if spec.ablation == "no_cha_temp" else "character_only")
        if result.mode != expected:
            rec.flags.append(f"degraded:{result.mode}")
        rec.raw_response = result.final_answer
    except BackendError as exc:
        rec.fail(stage, exc)
    finally:
        rec.timing_s = time.perf_counter() - t0
    return rec
