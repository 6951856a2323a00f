"""Turn declarative annotations into evaluation questions, and audit samples.

Each requested format gets one chat call with the annotation, the matching
subtitles and the series context. Replies are parsed, checked for structure
and for grounding in the annotated statement, and either kept as questions
(with provenance) or dropped with a reason.
"""

from __future__ import annotations

import hashlib
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .backend import Backend, BackendError, ChatRequest
from .datamodel import (
    FORMATS,
    AnswerKey,
    Annotation,
    Option,
    Question,
    SeriesCorpus,
    validate_annotation,
    validate_question,
)
from .harness.split import derive_seed
from .metrics import DEFAULT_TOKENIZER, simple_stem
from .prompting import PROMPT_VERSION, PromptTemplates, fmt_clock

LABELS = "ABCDE"
FORMAT_SUFFIX = {"multichoice": "mc", "judgment": "tf", "open_ended": "oe"}
TRUE_WORDS = ("a", "true", "yes", "correct", "对", "正确", "是")
FALSE_WORDS = ("b", "false", "no", "incorrect", "wrong", "错", "错误", "否")
_STOPWORDS = frozenset("a an the of to in on at and or is was were be by for with as it its that this".split())


class GenerationFailed(Exception):
    def __init__(self, dropped: list["Dropped"]):
        super().__init__("; ".join(f"{d.format}: {d.reason}" for d in dropped) or "nothing generated")
        self.dropped = dropped

    @property
    def raw_outputs(self) -> list[str]:
        return [d.raw for d in self.dropped]


@dataclass(frozen=True)
class GenerationRequest:
    annotation: Annotation
    subtitles: str = ""
    theme_text: str = ""
    character_sheet: str = ""
    target_formats: tuple[str, ...] = FORMATS
    distractor_count: int = 3

    def __post_init__(self):
        if not 1 <= self.distractor_count <= 4:
            raise ValueError("distractor_count must be between 1 and 4")
        bad = set(self.target_formats) - set(FORMATS)
        if bad or not self.target_formats:
            raise ValueError(f"unknown target formats {sorted(bad)}")


@dataclass(frozen=True)
class Dropped:
    format: str
    reason: str
    raw: str


@dataclass
class GenerationResult:
    questions: list[Question]
    dropped: list[Dropped] = field(default_factory=list)


def build_request(
    annotation: Annotation,
    corpus: SeriesCorpus,
    target_formats: Sequence[str] = FORMATS,
    distractor_count: int = 3,
) -> GenerationRequest:
    """Context drawn only from the annotation's own series and episode."""
    series = corpus.get_series(annotation.series_id)
    episode = series.episode(annotation.episode_index)
    cues = [
        c
        for c in episode.subtitles
        if any(c.start_s <= end and c.end_s >= start for start, end in annotation.time_spans)
    ]
    subs = "\n".join(f"[{fmt_clock(c.start_s)}] {c.speaker + ': ' if c.speaker else ''}{c.text}" for c in cues)
    wanted = set(annotation.character_refs)
    sheet = "\n".join(f"- {p.name}: {p.description}" for p in series.character_sheet if not wanted or p.name in wanted)
    return GenerationRequest(annotation, subs, series.theme_text, sheet, tuple(target_formats), distractor_count)


def _format_spec(fmt: str, k: int) -> tuple[str, str, str]:
    if fmt == "multichoice":
        last = LABELS[k]
        rules = (
            f"Write exactly {k + 1} options labelled A to {last}: the correct answer and {k} distractors "
            "that sound plausible but are contradicted by the video information above."
        )
        template = "Question: <question>\n" + "\n".join(f"{LABELS[i]}. <option>" for i in range(k + 1)) + "\nAnswer: <letter>"
        return "multiple-choice", rules, template
    if fmt == "judgment":
        rules = "Write one statement about the story that can be judged true or false from the statement above."
        return "true/false judgment", rules, "Statement: <statement>\nAnswer: <True or False>"
    rules = "The reference answer is one sentence restating the relevant part of the statement."
    return "open-ended", rules, "Question: <question>\nAnswer: <reference answer>"


def render_generation_prompt(req: GenerationRequest, fmt: str, templates: PromptTemplates) -> str:
    a = req.annotation
    name, rules, template = _format_spec(fmt, req.distractor_count)
    return templates.render(
        "generate_tasks",
        statement=a.declarative_statement,
        event_summary=a.event_summary,
        characters=", ".join(a.character_refs) or "(none)",
        theme=req.theme_text or "(none)",
        character_sheet=req.character_sheet or "(none)",
        subtitles=req.subtitles or "(none)",
        format_name=name,
        format_rules=rules,
        format_template=template,
    )


_STEM = re.compile(r"^\s*\**(question|statement|问题|陈述)\**\s*[:：]\s*(.+)$", re.I)
_OPTION = re.compile(r"^\s*\(?([A-E])[.)）:]\s*(.+)$")
_ANSWER = re.compile(r"^\s*\**(?:correct\s+)?(answer|答案)\**\s*[:：]\s*(.*)$", re.I)


def _content_tokens(text: str) -> set[str]:
    return {simple_stem(t) for t in DEFAULT_TOKENIZER(text) if t not in _STOPWORDS}


def grounding(answer: str, source: str) -> float:
    """Share of the answer's content tokens that also occur in ``source``."""
    toks = _content_tokens(answer)
    if not toks:
        return 0.0
    return len(toks & _content_tokens(source)) / len(toks)


def _polarity(text: str) -> bool | None:
    first = re.split(r"[\s.,;:!()*]+", text.strip().strip("(*").lower())[0]
    if first in TRUE_WORDS:
        return True
    if first in FALSE_WORDS:
        return False
    return None


def parse_generation(
    raw: str,
    fmt: str,
    annotation: Annotation,
    distractor_count: int = 3,
    min_grounding: float = 0.5,
) -> tuple[Question | None, str | None]:
    """``(question, None)`` when the reply is usable, else ``(None, reason)``."""
    stem = None
    options: list[Option] = []
    answer = None
    for line in raw.splitlines():
        if stem is None and (m := _STEM.match(line)):
            stem = m.group(2).strip()
        elif (m := _ANSWER.match(line)) is not None:
            answer = m.group(2).strip()
        elif (m := _OPTION.match(line)) is not None and answer is None:
            options.append(Option(m.group(1), m.group(2).strip()))
    if not stem:
        return None, "no question stem"
    if not answer:
        return None, "no answer key"
    source = f"{annotation.declarative_statement} {annotation.event_summary}"
    qid = f"{annotation.id}-{FORMAT_SUFFIX[fmt]}"
    base = dict(id=qid, series_id=annotation.series_id, episode_index=annotation.episode_index, subtask=annotation.subtask, format=fmt, stem=stem)

    if fmt == "multichoice":
        want = distractor_count + 1
        if len(options) != want:
            return None, f"expected {want} options, got {len(options)}"
        if [o.label for o in options] != list(LABELS[:want]):
            return None, "option labels are not consecutive from A"
        if len({o.text.casefold() for o in options}) != len(options):
            return None, "duplicate option text"
        m = re.match(r"^\(?([A-E])\b\)?", answer)
        if not m or m.group(1) not in LABELS[:want]:
            return None, "answer key does not resolve to an option"
        label = m.group(1)
        correct = next(o.text for o in options if o.label == label)
        score = grounding(correct, source)
        if score < min_grounding:
            return None, f"answer not grounded in the statement (overlap {score:.2f} < {min_grounding:.2f})"
        return Question(**base, options=tuple(options), answer=AnswerKey(label=label)), None

    if fmt == "judgment":
        polarity = _polarity(answer)
        if polarity is None:
            return None, "answer is not True or False"
        score = grounding(stem, source)
        if score < min_grounding:
            return None, f"statement not grounded in the annotation (overlap {score:.2f} < {min_grounding:.2f})"
        opts = (Option("A", "True"), Option("B", "False"))
        return Question(**base, options=opts, answer=AnswerKey(label="A" if polarity else "B")), None

    score = grounding(answer, source)
    if score < min_grounding:
        return None, f"answer not grounded in the statement (overlap {score:.2f} < {min_grounding:.2f})"
    return Question(**base, options=(), answer=AnswerKey(reference_text=answer)), None


def generate_tasks(
    req: GenerationRequest,
    backend: Backend,
    templates: PromptTemplates | None = None,
    corpus: SeriesCorpus | None = None,
    min_grounding: float = 0.5,
) -> GenerationResult:
    """One question per requested format; raises GenerationFailed if none survive."""
    templates = templates or PromptTemplates()
    problems = validate_annotation(req.annotation, corpus.taxonomy if corpus else None)
    if problems:
        raise ValueError(f"annotation {req.annotation.id}: " + "; ".join(problems))
    kept: list[Question] = []
    dropped: list[Dropped] = []
    for fmt in req.target_formats:
        prompt = render_generation_prompt(req, fmt, templates)
        chat = ChatRequest.user(
            [prompt],
            metadata={"stage": "generate_tasks", "question_id": req.annotation.id, "subject": fmt},
        )
        try:
            raw = backend.chat(chat).text
        except BackendError as exc:
            dropped.append(Dropped(fmt, f"backend error: {exc}", ""))
            continue
        q, reason = parse_generation(raw, fmt, req.annotation, req.distractor_count, min_grounding)
        if q is not None and corpus is not None:
            violations = validate_question(q, corpus)
            if violations:
                q, reason = None, "; ".join(str(v) for v in violations)
        if q is None:
            dropped.append(Dropped(fmt, reason or "invalid", raw))
            continue
        digest = hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:12]
        provenance = {"annotation_id": req.annotation.id, "prompt_digest": digest, "prompt_version": PROMPT_VERSION}
        kept.append(replace(q, provenance=provenance))
    if not kept:
        raise GenerationFailed(dropped)
    return GenerationResult(kept, dropped)


def generate_all(
    annotations: Sequence[Annotation],
    corpus: SeriesCorpus,
    backend: Backend,
    *,
    target_formats: Sequence[str] = FORMATS,
    distractor_count: int = 3,
    templates: PromptTemplates | None = None,
    max_workers: int = 1,
    min_grounding: float = 0.5,
) -> tuple[list[Question], dict[str, list[Dropped]]]:
    """Generate for many annotations; failures are collected per annotation id."""
    templates = templates or PromptTemplates()

    def one(a: Annotation):
        req = build_request(a, corpus, target_formats, distractor_count)
        try:
            res = generate_tasks(req, backend, templates, corpus, min_grounding)
            return res.questions, res.dropped
        except GenerationFailed as exc:
            return [], exc.dropped

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers) as pool:
            results = list(pool.map(one, annotations))
    else:
        results = [one(a) for a in annotations]
    questions: list[Question] = []
    drops: dict[str, list[Dropped]] = {}
    for a, (qs, dr) in zip(annotations, results):
        questions.extend(qs)
        if dr:
            drops[a.id] = dr
    return questions, drops


# ---------------------------------------------------------------- quality control


@dataclass
class AuditReport:
    sample_ids: list[str]
    verdicts: dict[str, bool]
    missing: list[str] = field(default_factory=list)

    @property
    def passed(self) -> int:
        return sum(self.verdicts.values())

    @property
    def total(self) -> int:
        return len(self.sample_ids)

    @property
    def pass_rate(self) -> float:
        return self.passed / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "sample_ids": self.sample_ids,
            "verdicts": self.verdicts,
            "missing": self.missing,
            "passed": self.passed,
            "total": self.total,
            "pass_rate": self.pass_rate,
        }


def structural_check(q: Question) -> bool:
    """Automatic checker: the question is well-formed for its format."""
    if not q.stem.strip():
        return False
    if q.format == "open_ended":
        return bool((q.answer.reference_text or "").strip()) and not q.options
    labels = q.labels
    return len(set(labels)) == len(labels) >= 2 and q.answer.label in labels


def load_verdicts(path: str | Path) -> dict[str, bool]:
    """``{"id": bool}`` JSON, or JSONL rows ``{"id": ..., "pass": bool}``."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        obj = None
    if isinstance(obj, dict):
        return {str(k): bool(v) for k, v in obj.items()}
    rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    return {str(r["id"]): bool(r["pass"]) for r in rows}


def quality_sample(
    questions: Sequence[Question],
    sample_size: int,
    seed: int = 0,
    checker: Callable[[Question], bool] | Mapping[str, bool] | str | Path | None = None,
) -> AuditReport:
    """Seeded sample without replacement, judged by ``checker``.

    ``checker`` may be a callable, a verdict mapping or a verdict file path;
    sampled items without a verdict count as failures and are listed.
    """
    if not 0 <= sample_size <= len(questions):
        raise ValueError(f"sample_size {sample_size} outside [0, {len(questions)}]")
    rng = np.random.default_rng(derive_seed(seed, "quality_sample"))
    chosen = sorted(rng.choice(len(questions), size=sample_size, replace=False).tolist())
    sample = [questions[i] for i in chosen]
    if checker is None:
        checker = structural_check
    if isinstance(checker, (str, Path)):
        checker = load_verdicts(checker)
    verdicts: dict[str, bool] = {}
    missing: list[str] = []
    for q in sample:
        if callable(checker):
            verdicts[q.id] = bool(checker(q))
        elif q.id in checker:
            verdicts[q.id] = bool(checker[q.id])
        else:
            verdicts[q.id] = False
            missing.append(q.id)
    return AuditReport([q.id for q in sample], verdicts, missing)
