"""Answer-agnostic reference rows: random guessing and the frequent guess."""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from ..datamodel import Question, SeriesCorpus
from ..metrics import ParsedChoice, accuracy
from .split import derive_seed, select

RANDOM_TRIALS = 5


@dataclass
class BaselineRow:
    name: str
    overall: float
    per_dimension: dict[str, float]
    n: int
    trials: int = 1

    def to_dict(self) -> dict:
        return {"name": self.name, "overall": self.overall, "per_dimension": self.per_dimension, "n": self.n, "trials": self.trials}


def _choice(questions) -> list[Question]:
    return [q for q in questions if q.is_choice]


def _mode(labels: list[str], order: list[str]) -> str:
    """Most common label; ties go to whichever comes first in option order."""
    counts = Counter(labels)
    best = max(counts.values())
    tied = [lbl for lbl, c in counts.items() if c == best]
    return min(tied, key=lambda lbl: (order.index(lbl) if lbl in order else len(order), lbl))


def _row(name: str, preds: list[list[tuple[ParsedChoice, Question]]], corpus: SeriesCorpus) -> BaselineRow:
    overall = []
    dims: dict[str, list[float]] = {}
    for trial in preds:
        acc = accuracy([(p, q.answer, q.subtask) for p, q in trial], corpus.taxonomy)
        overall.append(acc.overall)
        for d in acc.per_dimension:
            dims.setdefault(d, []).append(acc.dimension_accuracy(d))
    return BaselineRow(name, float(np.mean(overall)), {d: float(np.mean(v)) for d, v in sorted(dims.items())}, len(preds[0]), len(preds))


def random_baseline(corpus: SeriesCorpus, split: str | None = "test", seed: int = 0, trials: int = RANDOM_TRIALS) -> BaselineRow:
    """Uniform draw over each question's options, averaged over ``trials``."""
    test = _choice(select(corpus, split))
    if not test:
        raise ValueError("no choice-format questions to score")
    preds = []
    for t in range(trials):
        rng = np.random.default_rng(derive_seed(seed, "random_baseline", str(t)))
        guesses = [q.labels[int(rng.integers(len(q.labels)))] for q in test]
        preds.append([(ParsedChoice(g, "baseline", g), q) for g, q in zip(guesses, test)])
    return _row("random", preds, corpus)


def frequent_baseline(corpus: SeriesCorpus, split: str | None = "test", train_split: str = "train") -> BaselineRow:
    """Per-subtask most common training answer label, applied to ``split``."""
    test = _choice(select(corpus, split))
    if not test:
        raise ValueError("no choice-format questions to score")
    train = _choice(select(corpus, train_split))
    by_sub: dict[str, list[str]] = {}
    for q in train:
        by_sub.setdefault(q.subtask, []).append(q.answer.label)
    all_labels = [q.answer.label for q in train]
    preds = []
    for q in test:
        labels = by_sub.get(q.subtask)
        if not labels:
            if not all_labels:
                raise ValueError("training split has no choice questions")
            warnings.warn(f"no training questions for subtask {q.subtask!r}; using the global mode", stacklevel=2)
            labels = all_labels
        guess = _mode(labels, q.labels)
        preds.append((ParsedChoice(guess, "baseline", guess), q))
    return _row("frequent", [preds], corpus)


def heuristic_baseline(kind: str, corpus: SeriesCorpus, split: str | None = "test", seed: int = 0) -> BaselineRow:
    if kind == "random":
        return random_baseline(corpus, split, seed)
    if kind == "frequent":
        return frequent_baseline(corpus, split)
    raise ValueError(f"unknown baseline {kind!r}")
