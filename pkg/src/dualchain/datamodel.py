"""Core domain types, corpus manifest I/O and structural validation.

On-disk layout (all text UTF-8)::

    <root>/corpus.json                       series index + taxonomy
    <root>/<series>/ep001/frames.jsonl       {"index", "timestamp_s", "image_ref"} per line
    <root>/<series>/ep001/subtitles.json     list of {"start_s", "end_s", "text", "speaker"}
    <root>/questions.jsonl                   one question per line

The full field list lives in ``schema/corpus.schema.json``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from .taxonomy import DIMENSIONS, GENRES, TaskTaxonomy, default_taxonomy

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STUB_PREFIX = "stub:"
FORMATS = ("multichoice", "judgment", "open_ended")
SPLITS = ("train", "val", "test")
JUDGMENT_TEXTS = ("true", "false")


class CorpusError(Exception):
    pass


class CorpusSchemaError(CorpusError):
    """Manifest content does not parse into the domain types."""

    def __init__(self, path: str, field_name: str, message: str):
        super().__init__(f"{path}: field {field_name!r}: {message}")
        self.path = path
        self.field_name = field_name


class CorpusValidationError(CorpusError):
    def __init__(self, report: "ValidationReport"):
        super().__init__(f"corpus failed validation with {len(report.violations)} violation(s):\n{report.render()}")
        self.report = report


# --------------------------------------------------------------------------- types


@dataclass(frozen=True)
class CharacterProfile:
    name: str
    description: str = ""
    portrait_ref: str | None = None


@dataclass(frozen=True)
class Frame:
    index: int
    timestamp_s: float
    image_ref: str


@dataclass(frozen=True)
class FrameSequence:
    entries: tuple[Frame, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Frame]:
        return iter(self.entries)

    def __getitem__(self, pos: int) -> Frame:
        return self.entries[pos]

    @property
    def indices(self) -> list[int]:
        return [f.index for f in self.entries]

    @property
    def timestamps(self) -> list[float]:
        return [f.timestamp_s for f in self.entries]

    def position_of(self, frame_index: int) -> int:
        for pos, f in enumerate(self.entries):
            if f.index == frame_index:
                return pos
        raise KeyError(frame_index)

    def timestamp_of(self, frame_index: int) -> float:
        return self.entries[self.position_of(frame_index)].timestamp_s


@dataclass(frozen=True)
class SubtitleCue:
    start_s: float
    end_s: float
    text: str
    speaker: str | None = None


@dataclass(frozen=True)
class Episode:
    series_id: str
    index: int
    frames: FrameSequence
    subtitles: tuple[SubtitleCue, ...]
    duration_s: float


@dataclass(frozen=True)
class Series:
    id: str
    genre: str
    theme_text: str
    character_sheet: tuple[CharacterProfile, ...]
    episodes: tuple[Episode, ...]

    def episode(self, index: int) -> Episode:
        for ep in self.episodes:
            if ep.index == index:
                return ep
        raise KeyError(f"series {self.id!r} has no episode {index}")

    def profile(self, name: str) -> CharacterProfile | None:
        for p in self.character_sheet:
            if p.name == name:
                return p
        return None


@dataclass(frozen=True)
class Option:
    label: str
    text: str


@dataclass(frozen=True)
class AnswerKey:
    label: str | None = None
    reference_text: str | None = None


@dataclass(frozen=True)
class Question:
    id: str
    series_id: str
    episode_index: int
    subtask: str
    format: str
    stem: str
    options: tuple[Option, ...]
    answer: AnswerKey
    split: str | None = None
    provenance: dict | None = field(default=None, compare=True, hash=False)

    @property
    def is_choice(self) -> bool:
        return self.format in ("multichoice", "judgment")

    @property
    def labels(self) -> list[str]:
        return [o.label for o in self.options]

    def option_text(self, label: str) -> str | None:
        for o in self.options:
            if o.label == label:
                return o.text
        return None


@dataclass(frozen=True)
class Annotation:
    id: str
    series_id: str
    episode_index: int
    time_spans: tuple[tuple[float, float], ...]
    event_summary: str
    character_refs: tuple[str, ...]
    portrait_refs: tuple[str, ...]
    declarative_statement: str
    subtask: str


@dataclass(frozen=True)
class SeriesCorpus:
    series: tuple[Series, ...]
    taxonomy: TaskTaxonomy
    questions: tuple[Question, ...] = ()
    root_path: Path | None = field(default=None, compare=False)

    def get_series(self, series_id: str) -> Series:
        for s in self.series:
            if s.id == series_id:
                return s
        raise KeyError(f"unknown series {series_id!r}")

    def get_episode(self, series_id: str, index: int) -> Episode:
        return self.get_series(series_id).episode(index)

    def get_question(self, qid: str) -> Question:
        for q in self.questions:
            if q.id == qid:
                return q
        raise KeyError(f"unknown question {qid!r}")

    @property
    def episodes(self) -> list[Episode]:
        return [ep for s in self.series for ep in s.episodes]

    def with_questions(self, questions: Iterable[Question]) -> "SeriesCorpus":
        return SeriesCorpus(self.series, self.taxonomy, tuple(questions), self.root_path)


# --------------------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    locus: str
    message: str

    def __str__(self) -> str:
        return f"{self.locus}: {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, locus: str, message: str) -> None:
        self.violations.append(Violation(locus, message))

    def render(self) -> str:
        if self.ok:
            return "corpus valid: 0 violations"
        return "\n".join(str(v) for v in self.violations)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "violations": [{"locus": v.locus, "message": v.message} for v in self.violations]}


def _validate_taxonomy(tax: TaskTaxonomy, report: ValidationReport) -> None:
    if len(tax.dimensions) != len(DIMENSIONS) or set(tax.dimensions) != set(DIMENSIONS):
        report.add("taxonomy.dimensions", f"expected the {len(DIMENSIONS)} dimensions {list(DIMENSIONS)}, got {list(tax.dimensions)}")
    seen: set[str] = set()
    for st in tax.subtasks:
        if st.name in seen:
            report.add(f"taxonomy.subtasks[{st.name}]", "leaf listed more than once")
        seen.add(st.name)
        if st.dimension not in tax.dimensions:
            report.add(f"taxonomy.subtasks[{st.name}]", f"parent dimension {st.dimension!r} is not a taxonomy dimension")


def _validate_episode(ep: Episode, locus: str, root: Path | None, report: ValidationReport) -> None:
    if ep.duration_s < 0:
        report.add(f"{locus}.duration_s", f"negative duration {ep.duration_s}")
    if not ep.frames.entries:
        report.add(f"{locus}.frames", "frame sequence is empty")
    prev: Frame | None = None
    for pos, fr in enumerate(ep.frames):
        floc = f"{locus}.frames[{pos}]"
        if prev is not None:
            if fr.index <= prev.index:
                report.add(floc, f"frame_index {fr.index} not strictly greater than previous {prev.index}")
            if fr.timestamp_s < prev.timestamp_s:
                report.add(floc, f"timestamp {fr.timestamp_s} decreases from {prev.timestamp_s}")
        if fr.timestamp_s < 0:
            report.add(floc, f"negative timestamp {fr.timestamp_s}")
        if not fr.image_ref:
            report.add(floc, "empty image_ref")
        elif not fr.image_ref.startswith(STUB_PREFIX) and root is not None:
            if not (root / fr.image_ref).exists():
                report.add(floc, f"image_ref {fr.image_ref!r} does not resolve to a file or declared stub")
        prev = fr
    for ci, cue in enumerate(ep.subtitles):
        cloc = f"{locus}.subtitles[{ci}]"
        if cue.start_s > cue.end_s:
            report.add(cloc, f"start_s {cue.start_s} > end_s {cue.end_s}")
        if cue.start_s < 0 or cue.end_s > ep.duration_s:
            report.add(cloc, f"cue [{cue.start_s}, {cue.end_s}] outside episode bounds [0, {ep.duration_s}]")


def _validate_question(q: Question, corpus: SeriesCorpus, leaves: set[str], report: ValidationReport) -> None:
    loc = f"questions[{q.id}]"
    try:
        corpus.get_series(q.series_id).episode(q.episode_index)
    except KeyError:
        report.add(loc, f"dangling reference to series {q.series_id!r} episode {q.episode_index}")
    if q.subtask not in leaves:
        report.add(f"{loc}.subtask", f"{q.subtask!r} is not a taxonomy leaf")
    if q.format not in FORMATS:
        report.add(f"{loc}.format", f"unknown format {q.format!r}")
        return
    if q.split is not None and q.split not in SPLITS:
        report.add(f"{loc}.split", f"unknown split {q.split!r}")
    if not q.stem.strip():
        report.add(f"{loc}.stem", "empty stem")
    labels = q.labels
    if len(set(labels)) != len(labels):
        report.add(f"{loc}.options", "duplicate option labels")
    if q.format == "multichoice" and not 2 <= len(q.options) <= 5:
        report.add(f"{loc}.options", f"multichoice needs 2-5 options, got {len(q.options)}")
    if q.format == "judgment":
        texts = tuple(o.text.strip().lower() for o in q.options)
        if len(q.options) != 2 or sorted(texts) != sorted(JUDGMENT_TEXTS):
            report.add(f"{loc}.options", f"judgment options must be the True/False pair, got {len(q.options)} option(s)")
    if q.format == "open_ended":
        if q.options:
            report.add(f"{loc}.options", "open_ended question carries options")
        if not (q.answer.reference_text or "").strip():
            report.add(f"{loc}.answer", "open_ended answer needs a nonempty reference_text")
        if q.answer.label is not None:
            report.add(f"{loc}.answer", "open_ended answer must not carry a label")
    else:
        if q.answer.label not in labels:
            report.add(f"{loc}.answer", f"answer label {q.answer.label!r} is not an option label {labels}")
        if q.answer.reference_text is not None:
            report.add(f"{loc}.answer", "choice answer must not carry reference_text")


def validate_corpus(corpus: SeriesCorpus) -> ValidationReport:
    """Check every structural invariant; violations are collected, never raised."""
    report = ValidationReport()
    _validate_taxonomy(corpus.taxonomy, report)
    root = Path(corpus.root_path) if corpus.root_path is not None else None
    seen_series: set[str] = set()
    for s in corpus.series:
        sloc = f"series[{s.id}]"
        if s.id in seen_series:
            report.add(sloc, "duplicate series id")
        seen_series.add(s.id)
        if s.genre not in GENRES:
            report.add(f"{sloc}.genre", f"{s.genre!r} not in the closed genre set")
        names: set[str] = set()
        for ci, prof in enumerate(s.character_sheet):
            if not prof.name.strip():
                report.add(f"{sloc}.character_sheet[{ci}]", "empty character name")
            elif prof.name in names:
                report.add(f"{sloc}.character_sheet[{ci}]", f"duplicate character name {prof.name!r}")
            names.add(prof.name)
        if not s.episodes:
            report.add(f"{sloc}.episodes", "series has no episodes")
        for pos, ep in enumerate(s.episodes):
            eloc = f"{sloc}.episodes[{ep.index}]"
            if ep.index != pos + 1:
                report.add(eloc, f"episode at position {pos} has index {ep.index}; expected {pos + 1}")
            if ep.series_id != s.id:
                report.add(eloc, f"episode series_id {ep.series_id!r} does not match {s.id!r}")
            _validate_episode(ep, eloc, root, report)
    leaves = set(corpus.taxonomy.leaves())
    seen_q: set[str] = set()
    for q in corpus.questions:
        if q.id in seen_q:
            report.add(f"questions[{q.id}]", "duplicate question id")
        seen_q.add(q.id)
        _validate_question(q, corpus, leaves, report)
    return report


def validate_question(q: Question, corpus: SeriesCorpus) -> list[Violation]:
    """Invariant violations of one question against ``corpus``."""
    report = ValidationReport()
    _validate_question(q, corpus, set(corpus.taxonomy.leaves()), report)
    return report.violations


def validate_annotation(a: Annotation, taxonomy: TaskTaxonomy | None = None) -> list[str]:
    taxonomy = taxonomy or default_taxonomy()
    problems = []
    if not a.time_spans:
        problems.append("no time spans")
    for start, end in a.time_spans:
        if start > end:
            problems.append(f"time span [{start}, {end}] is reversed")
    if not a.declarative_statement.strip():
        problems.append("empty declarative statement")
    if a.subtask not in taxonomy.leaves():
        problems.append(f"unknown subtask {a.subtask!r}")
    return problems


# --------------------------------------------------------------------------- (de)serialisation


def _req(obj: dict, key: str, path: str, kind: type | tuple[type, ...] | None = None) -> Any:
    if not isinstance(obj, dict):
        raise CorpusSchemaError(path, key, f"expected an object, got {type(obj).__name__}")
    if key not in obj:
        raise CorpusSchemaError(path, key, "missing")
    val = obj[key]
    if kind is not None and not isinstance(val, kind) or isinstance(val, bool) and kind in (int, float, (int, float)):
        raise CorpusSchemaError(path, key, f"expected {getattr(kind, '__name__', kind)}, got {type(val).__name__}")
    return val


def _ms(t: float) -> float:
    return round(float(t), 3)


def question_to_dict(q: Question) -> dict:
    d = {
        "id": q.id,
        "series_id": q.series_id,
        "episode_index": q.episode_index,
        "subtask": q.subtask,
        "format": q.format,
        "stem": q.stem,
        "options": [{"label": o.label, "text": o.text} for o in q.options],
        "answer": {"label": q.answer.label, "reference_text": q.answer.reference_text},
        "split": q.split,
    }
    if q.provenance is not None:
        d["provenance"] = q.provenance
    return d


def question_from_dict(d: dict, path: str = "questions.jsonl") -> Question:
    ans = _req(d, "answer", path, dict)
    opts = _req(d, "options", path, list)
    return Question(
        id=str(_req(d, "id", path, str)),
        series_id=_req(d, "series_id", path, str),
        episode_index=_req(d, "episode_index", path, int),
        subtask=_req(d, "subtask", path, str),
        format=_req(d, "format", path, str),
        stem=_req(d, "stem", path, str),
        options=tuple(Option(str(_req(o, "label", path)), str(_req(o, "text", path))) for o in opts),
        answer=AnswerKey(ans.get("label"), ans.get("reference_text")),
        split=d.get("split"),
        provenance=d.get("provenance"),
    )


def annotation_from_dict(d: dict, path: str = "annotations.jsonl") -> Annotation:
    return Annotation(
        id=str(_req(d, "id", path)),
        series_id=_req(d, "series_id", path, str),
        episode_index=_req(d, "episode_index", path, int),
        time_spans=tuple((float(a), float(b)) for a, b in _req(d, "time_spans", path, list)),
        event_summary=d.get("event_summary", ""),
        character_refs=tuple(d.get("character_refs", ())),
        portrait_refs=tuple(d.get("portrait_refs", ())),
        declarative_statement=_req(d, "declarative_statement", path, str),
        subtask=_req(d, "subtask", path, str),
    )


def annotation_to_dict(a: Annotation) -> dict:
    return {
        "id": a.id,
        "series_id": a.series_id,
        "episode_index": a.episode_index,
        "time_spans": [list(s) for s in a.time_spans],
        "event_summary": a.event_summary,
        "character_refs": list(a.character_refs),
        "portrait_refs": list(a.portrait_refs),
        "declarative_statement": a.declarative_statement,
        "subtask": a.subtask,
    }


def episode_dir(series_id: str, index: int) -> str:
    return f"{series_id}/ep{index:03d}"


def write_jsonl(path: Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorpusSchemaError(f"{path}:{lineno}", "<line>", f"invalid JSON ({exc.msg})") from None
    return rows


def save_corpus(corpus: SeriesCorpus, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "taxonomy": corpus.taxonomy.to_dict(),
        "series": [],
    }
    for s in corpus.series:
        entry = {
            "id": s.id,
            "genre": s.genre,
            "theme_text": s.theme_text,
            "character_sheet": [
                {"name": p.name, "description": p.description, "portrait_ref": p.portrait_ref}
                for p in s.character_sheet
            ],
            "episodes": [],
        }
        for ep in s.episodes:
            rel = episode_dir(s.id, ep.index)
            (root / rel).mkdir(parents=True, exist_ok=True)
            write_jsonl(
                root / rel / "frames.jsonl",
                ({"index": f.index, "timestamp_s": _ms(f.timestamp_s), "image_ref": f.image_ref} for f in ep.frames),
            )
            cues = [
                {"start_s": _ms(c.start_s), "end_s": _ms(c.end_s), "text": c.text, "speaker": c.speaker}
                for c in ep.subtitles
            ]
            (root / rel / "subtitles.json").write_text(
                json.dumps(cues, ensure_ascii=False, indent=1, sort_keys=True) + "\n", encoding="utf-8"
            )
            entry["episodes"].append(
                {
                    "index": ep.index,
                    "duration_s": _ms(ep.duration_s),
                    "frames": f"{rel}/frames.jsonl",
                    "subtitles": f"{rel}/subtitles.json",
                }
            )
        index["series"].append(entry)
    (root / "corpus.json").write_text(json.dumps(index, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_jsonl(root / "questions.jsonl", (question_to_dict(q) for q in corpus.questions))
    return root


def _load_episode(root: Path, series_id: str, e: dict, path: str) -> Episode:
    frames_rel = _req(e, "frames", path, str)
    subs_rel = _req(e, "subtitles", path, str)
    frames_path = root / frames_rel
    if not frames_path.exists():
        raise CorpusSchemaError(path, "frames", f"frame manifest {frames_rel} not found")
    frames = []
    for i, row in enumerate(read_jsonl(frames_path)):
        fpath = f"{frames_rel}[{i}]"
        frames.append(
            Frame(
                index=_req(row, "index", fpath, int),
                timestamp_s=_ms(_req(row, "timestamp_s", fpath, (int, float))),
                image_ref=_req(row, "image_ref", fpath, str),
            )
        )
    subs_path = root / subs_rel
    cues: list[SubtitleCue] = []
    if subs_path.exists():
        try:
            raw = json.loads(subs_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorpusSchemaError(subs_rel, "<file>", f"invalid JSON ({exc.msg})") from None
        if not isinstance(raw, list):
            raise CorpusSchemaError(subs_rel, "<file>", "expected a list of cues")
        for i, c in enumerate(raw):
            cpath = f"{subs_rel}[{i}]"
            cues.append(
                SubtitleCue(
                    start_s=_ms(_req(c, "start_s", cpath, (int, float))),
                    end_s=_ms(_req(c, "end_s", cpath, (int, float))),
                    text=_req(c, "text", cpath, str),
                    speaker=c.get("speaker"),
                )
            )
    return Episode(
        series_id=series_id,
        index=_req(e, "index", path, int),
        frames=FrameSequence(tuple(frames)),
        subtitles=tuple(cues),
        duration_s=_ms(_req(e, "duration_s", path, (int, float))),
    )


def load_corpus(root: str | Path, validate: bool = True) -> SeriesCorpus:
    """Load ``corpus.json`` and its referenced files.

    Raises CorpusSchemaError for anything that cannot be parsed and, when
    ``validate`` is set, CorpusValidationError if any invariant is violated.
    """
    root = Path(root)
    manifest = root / "corpus.json"
    if not manifest.exists():
        raise CorpusError(f"no corpus manifest at {manifest}")
    try:
        index = json.loads(manifest.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CorpusSchemaError("corpus.json", "<file>", f"invalid JSON ({exc.msg})") from None
    tax_raw = index.get("taxonomy")
    taxonomy = TaskTaxonomy.from_dict(tax_raw) if tax_raw else default_taxonomy()
    series = []
    for si, s in enumerate(_req(index, "series", "corpus.json", list)):
        spath = f"corpus.json:series[{si}]"
        sid = _req(s, "id", spath, str)
        profiles = tuple(
            CharacterProfile(
                name=_req(p, "name", f"{spath}.character_sheet[{pi}]", str),
                description=p.get("description", ""),
                portrait_ref=p.get("portrait_ref"),
            )
            for pi, p in enumerate(s.get("character_sheet", []))
        )
        episodes = tuple(
            _load_episode(root, sid, e, f"{spath}.episodes[{ei}]")
            for ei, e in enumerate(_req(s, "episodes", spath, list))
        )
        series.append(
            Series(
                id=sid,
                genre=_req(s, "genre", spath, str),
                theme_text=s.get("theme_text", ""),
                character_sheet=profiles,
                episodes=episodes,
            )
        )
    qpath = root / "questions.jsonl"
    questions = []
    if qpath.exists():
        for i, row in enumerate(read_jsonl(qpath)):
            questions.append(question_from_dict(row, f"questions.jsonl[{i}]"))
    corpus = SeriesCorpus(tuple(series), taxonomy, tuple(questions), root)
    if validate:
        report = validate_corpus(corpus)
        if not report.ok:
            raise CorpusValidationError(report)
    return corpus


def validate_path(root: str | Path) -> ValidationReport:
    """Load without raising: parse failures become report entries too."""
    try:
        corpus = load_corpus(root, validate=False)
    except CorpusSchemaError as exc:
        report = ValidationReport()
        report.add(f"{exc.path}.{exc.field_name}", str(exc))
        return report
    except CorpusError as exc:
        report = ValidationReport()
        report.add(str(root), str(exc))
        return report
    return validate_corpus(corpus)
