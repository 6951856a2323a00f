"""Small hand-built corpora for harness tests."""

from __future__ import annotations

from dualchain.backend import MockBackend, MockRule
from dualchain.datamodel import (
    AnswerKey,
    CharacterProfile,
    Episode,
    Frame,
    FrameSequence,
    Option,
    Question,
    Series,
    SeriesCorpus,
    SubtitleCue,
)
from dualchain.taxonomy import default_taxonomy

LABELS = "ABCD"


def episode(sid: str, idx: int, n_frames: int = 12) -> Episode:
    frames = FrameSequence(tuple(Frame(i, float(i), f"stub:{sid}/ep{idx:03d}/{i:04d}") for i in range(n_frames)))
    subs = (SubtitleCue(0.5, 2.0, f"line one of episode {idx}", "Mira"), SubtitleCue(3.0, 4.5, f"line two of episode {idx}"))
    return Episode(sid, idx, frames, subs, float(n_frames))


def series(sid: str = "S01", n_episodes: int = 4, n_frames: int = 12) -> Series:
    sheet = (CharacterProfile("Mira", "a restless student"), CharacterProfile("Tobin"))
    return Series(sid, "Urban Life", "A city story.", sheet, tuple(episode(sid, i, n_frames) for i in range(1, n_episodes + 1)))


def choice_question(i: int, answer: str, subtask: str = "actions", split: str | None = None, sid: str = "S01", ep: int = 1) -> Question:
    opts = tuple(Option(lbl, f"option {lbl.lower()} for item {i}") for lbl in LABELS)
    return Question(f"q{i:04d}", sid, ep, subtask, "multichoice", f"What happens in scene {i}?", opts, AnswerKey(label=answer), split)


def open_question(i: int, reference: str, subtask: str = "plot_development", sid: str = "S01", ep: int = 1) -> Question:
    return Question(f"o{i:04d}", sid, ep, subtask, "open_ended", f"Describe scene {i}.", (), AnswerKey(reference_text=reference))


def corpus(questions, n_episodes: int = 4, n_frames: int = 12) -> SeriesCorpus:
    return SeriesCorpus((series(n_episodes=n_episodes, n_frames=n_frames),), default_taxonomy(), tuple(questions))


def answering_mock(answers: dict[str, str], seed: int = 0) -> MockBackend:
    """Mock that replies ``(X)`` to each question id, per ``answers``."""
    rules = [MockRule(f"({lbl})", stage="answer", question_id=qid) for qid, lbl in answers.items()]
    return MockBackend(seed, dim=16, rules=rules)
