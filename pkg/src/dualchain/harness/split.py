"""Stratified train/val/test assignment.

Each subtask stratum is shuffled with its own seed derived from the root
seed, then cut by largest-remainder rounding of the ratio quotas. Ties in the
fractional parts go to the earlier split (train, then val, then test).
"""

from __future__ import annotations

import logging
import warnings
import zlib
from dataclasses import replace
from typing import Iterable, Sequence

import numpy as np

from ..datamodel import SPLITS, Question, SeriesCorpus

log = logging.getLogger(__name__)

MIN_STRATUM = 3


def derive_seed(seed: int, *names: str) -> np.random.SeedSequence:
    """Independent, name-addressed child seed of ``seed``."""
    key = tuple(zlib.crc32(n.encode("utf-8")) for n in names)
    return np.random.SeedSequence(seed, spawn_key=key)


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    total = float(sum(ratios))
    if total <= 0 or any(r < 0 for r in ratios):
        raise ValueError(f"invalid ratios {ratios}")
    quotas = [n * r / total for r in ratios]
    counts = [int(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(
    questions: Iterable[Question],
    ratios: Sequence[float] = (8, 1, 1),
    seed: int = 0,
) -> dict[str, str]:
    """Map question id to ``train``/``val``/``test``, stratified by subtask."""
    if len(ratios) != len(SPLITS):
        raise ValueError("ratios must give train, val and test weights")
    strata: dict[str, list[str]] = {}
    for q in questions:
        if not q.subtask:
            raise ValueError(f"question {q.id} has no subtask label")
        strata.setdefault(q.subtask, []).append(q.id)
    out: dict[str, str] = {}
    for subtask in sorted(strata):
        ids = sorted(strata[subtask])
        if len(ids) < MIN_STRATUM:
            warnings.warn(f"stratum {subtask!r} has {len(ids)} question(s); all assigned to train", stacklevel=2)
            out.update((qid, "train") for qid in ids)
            continue
        rng = np.random.default_rng(derive_seed(seed, "split", subtask))
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        start = 0
        for name, count in zip(SPLITS, largest_remainder(len(ids), ratios)):
            out.update((qid, name) for qid in shuffled[start : start + count])
            start += count
    return out


def apply_split(corpus: SeriesCorpus, assignment: dict[str, str]) -> SeriesCorpus:
    return corpus.with_questions(replace(q, split=assignment.get(q.id, q.split)) for q in corpus.questions)


def select(corpus: SeriesCorpus, split: str | None) -> list[Question]:
    """Questions of one split; ``None`` or ``"all"`` selects everything."""
    if split in (None, "all"):
        return list(corpus.questions)
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return [q for q in corpus.questions if q.split == split]
