"""Answer parsing and scoring: accuracy for choice formats, BLEU-2, a METEOR
variant without the synonym stage, and embedding-based greedy-matching F1."""

from __future__ import annotations

import json
import math
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backend import Backend
from .datamodel import AnswerKey, Option
from .taxonomy import TaskTaxonomy, default_taxonomy

UNPARSED = "Unparsed"

# ----------------------------------------------------------------------------- choice parsing

TRUE_WORDS = ("true", "yes", "correct", "right", "正确", "对", "是")
FALSE_WORDS = ("false", "no", "incorrect", "wrong", "不正确", "不对", "错误", "错", "否")

_PAREN_LABEL = re.compile(r"[(（]\s*([A-Za-z])\s*[)）]")
_BARE_LABEL = re.compile(r"^\s*([A-Za-z])\s*$")
_LEADING_LABEL = re.compile(r"^\s*([A-Za-z])\s*[.)．:：]", re.M)
_ANSWER_IS = re.compile(r"\b(?:answer|option|choice)\s*(?:is|:|：)?\s*\(?([A-Za-z])\)?(?![\w'])", re.I)


@dataclass(frozen=True)
class ParsedChoice:
    label: str
    rule: str
    raw: str

    @property
    def parsed(self) -> bool:
        return self.label != UNPARSED

    def to_dict(self) -> dict:
        return {"label": self.label, "rule": self.rule, "raw": self.raw}

    @classmethod
    def from_dict(cls, d: dict) -> "ParsedChoice":
        return cls(d["label"], d["rule"], d["raw"])


def _norm(text: str) -> str:
    text = unicodedata.normalize("NFKC", text).lower()
    text = re.sub(r"[^\w\s]", " ", text)
    return " ".join(text.split())


def _as_options(options) -> list[Option]:
    return [o if isinstance(o, Option) else Option(*o) for o in options]


def _judgment_pair(options: Sequence[Option]) -> dict[str, str] | None:
    if len(options) != 2:
        return None
    polarity = {_norm(o.text): o.label for o in options}
    if set(polarity) != {"true", "false"}:
        return None
    return polarity


def _first_keyword(text: str) -> str | None:
    """Polarity of the earliest judgment keyword; longer keywords win ties."""
    best: tuple[int, int, str] | None = None
    low = text.lower()
    for polarity, words in (("true", TRUE_WORDS), ("false", FALSE_WORDS)):
        for w in words:
            pat = rf"(?<![a-z]){re.escape(w)}(?![a-z])" if w.isascii() else re.escape(w)
            m = re.search(pat, low)
            if m and (best is None or (m.start(), -len(w)) < (best[0], best[1])):
                best = (m.start(), -len(w), polarity)
    return best[2] if best else None


def parse_choice(raw: str, options) -> ParsedChoice:
    """Map a free-form model reply to an option label.

    Rules, first hit wins: an explicit label token ("(B)", "B.", a bare "B",
    "answer is B"); the longest option text contained in the reply; a
    true/false keyword when the options are a judgment pair; else Unparsed.
    """
    opts = _as_options(options)
    if not opts:
        raise ValueError("parse_choice needs at least one option")
    labels = {o.label.upper(): o.label for o in opts}
    for rx in (_PAREN_LABEL, _BARE_LABEL, _LEADING_LABEL, _ANSWER_IS):
        for m in rx.finditer(raw):
            hit = labels.get(m.group(1).upper())
            if hit is not None:
                return ParsedChoice(hit, "label", raw)
    norm_raw = f" {_norm(raw)} "
    best: Option | None = None
    for o in opts:
        t = _norm(o.text)
        if t and f" {t} " in norm_raw and (best is None or len(t) > len(_norm(best.text))):
            best = o
    if best is not None:
        return ParsedChoice(best.label, "option_text", raw)
    pair = _judgment_pair(opts)
    if pair is not None:
        polarity = _first_keyword(raw)
        if polarity is not None:
            return ParsedChoice(pair[polarity], "judgment_keyword", raw)
    return ParsedChoice(UNPARSED, "unparsed", raw)


# ----------------------------------------------------------------------------- accuracy


@dataclass
class AccuracyBreakdown:
    correct: int
    total: int
    per_dimension: dict[str, tuple[int, int]]
    per_subtask: dict[str, tuple[int, int]]
    unparsed: int = 0

    @property
    def overall(self) -> float:
        return self.correct / self.total

    def dimension_accuracy(self, dim: str) -> float:
        c, t = self.per_dimension[dim]
        return c / t


def accuracy(records: Sequence[tuple[ParsedChoice, AnswerKey, str]], taxonomy: TaskTaxonomy | None = None) -> AccuracyBreakdown:
    """Exact-match accuracy over ``(parsed, key, subtask)`` triples."""
    if not records:
        raise ValueError("accuracy of an empty record set is undefined")
    taxonomy = taxonomy or default_taxonomy()
    per_dim: dict[str, list[int]] = {}
    per_sub: dict[str, list[int]] = {}
    correct = unparsed = 0
    for parsed, key, subtask in records:
        hit = parsed.parsed and key.label is not None and parsed.label == key.label
        correct += hit
        unparsed += not parsed.parsed
        for table, name in ((per_dim, taxonomy.dimension_of(subtask)), (per_sub, subtask)):
            cell = table.setdefault(name, [0, 0])
            cell[0] += hit
            cell[1] += 1
    return AccuracyBreakdown(
        correct,
        len(records),
        {k: (v[0], v[1]) for k, v in per_dim.items()},
        {k: (v[0], v[1]) for k, v in per_sub.items()},
        unparsed,
    )


# ----------------------------------------------------------------------------- tokenisation

_CJK_RANGES = "぀-ヿ㐀-䶿一-鿿豈-﫿가-힯"
_TOKEN = re.compile(rf"[{_CJK_RANGES}]+|[^\W_{_CJK_RANGES}]+")
_IS_CJK = re.compile(rf"^[{_CJK_RANGES}]")


@dataclass(frozen=True)
class Tokenizer:
    """Latin text splits on whitespace and punctuation. CJK runs split per
    character (``cjk="char"``) or stay whole (``cjk="word"``)."""

    cjk: str = "char"
    lowercase: bool = True

    def __call__(self, text: str) -> list[str]:
        text = unicodedata.normalize("NFKC", text)
        if self.lowercase:
            text = text.lower()
        out: list[str] = []
        for tok in _TOKEN.findall(text):
            if self.cjk == "char" and _IS_CJK.match(tok):
                out.extend(tok)
            else:
                out.append(tok)
        return out


DEFAULT_TOKENIZER = Tokenizer()


def simple_stem(word: str) -> str:
    """Strip one common English suffix; anything non-ASCII passes through."""
    if not word.isascii():
        return word
    w = word.lower()
    if w.endswith("ies") and len(w) > 4:
        return w[:-3] + "y"
    for suffix in ("ing", "ed", "ly", "s"):
        if w.endswith(suffix) and len(w) - len(suffix) >= 3 and not w.endswith("ss"):
            return w[: -len(suffix)]
    return w


# ----------------------------------------------------------------------------- BLEU-2


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu2(candidate: str, reference: str, tokenizer: Callable[[str], list[str]] = DEFAULT_TOKENIZER, smoothing: bool = False, eps: float = 1e-9) -> float:
    """Sentence BLEU with uniform 1-gram/2-gram weights and a brevity penalty.

    Without smoothing any zero n-gram precision gives exactly 0; with it, zero
    counts are replaced by ``eps``.
    """
    ref = tokenizer(reference)
    if not ref:
        raise ValueError("reference must contain at least one token")
    cand = tokenizer(candidate)
    if not cand:
        return 0.0
    log_p = 0.0
    for n in (1, 2):
        cand_ng = _ngrams(cand, n)
        ref_ng = _ngrams(ref, n)
        total = sum(cand_ng.values())
        clipped = sum(min(c, ref_ng[g]) for g, c in cand_ng.items())
        if clipped == 0 or total == 0:
            if not smoothing:
                return 0.0
            p = eps / max(total, 1)
        else:
            p = clipped / total
        log_p += 0.5 * math.log(p)
    bp = 1.0 if len(cand) > len(ref) else math.exp(1.0 - len(ref) / len(cand))
    return bp * math.exp(log_p)


# ----------------------------------------------------------------------------- METEOR (no synonyms)


def align(cand: Sequence[str], ref: Sequence[str], stemmer: Callable[[str], str] | None = simple_stem) -> list[tuple[int, int]]:
    """Unigram alignment: an exact stage, then a stem stage over what is left.

    Within a stage each candidate token (left to right) takes the unmatched
    reference token that continues the previous match when possible, else the
    leftmost unmatched one, which keeps the chunk count low.
    """
    pairs: dict[int, int] = {}
    used: set[int] = set()
    stages = [lambda t: t]
    if stemmer is not None:
        stages.append(stemmer)
    for key in stages:
        ref_keys = [key(t) for t in ref]
        for ci, tok in enumerate(cand):
            if ci in pairs:
                continue
            k = key(tok)
            options = [ri for ri, rk in enumerate(ref_keys) if rk == k and ri not in used]
            if not options:
                continue
            prev = pairs.get(ci - 1)
            choice = prev + 1 if prev is not None and prev + 1 in options else options[0]
            pairs[ci] = choice
            used.add(choice)
    return sorted(pairs.items())


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    if not pairs:
        return 0
    chunks = 1
    for (c0, r0), (c1, r1) in zip(pairs, pairs[1:]):
        if not (c1 == c0 + 1 and r1 == r0 + 1):
            chunks += 1
    return chunks


def meteor_from_counts(matches: int, cand_len: int, ref_len: int, chunks: int, alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    if matches == 0:
        return 0.0
    p = matches / cand_len
    r = matches / ref_len
    f_mean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (chunks / matches) ** beta
    return f_mean * (1.0 - penalty)


def meteor_lite(candidate: str, reference: str, tokenizer: Callable[[str], list[str]] = DEFAULT_TOKENIZER, stemmer: Callable[[str], str] | None = simple_stem) -> float:
    ref = tokenizer(reference)
    if not ref:
        raise ValueError("reference must contain at least one token")
    cand = tokenizer(candidate)
    if not cand:
        return 0.0
    pairs = align(cand, ref, stemmer)
    return meteor_from_counts(len(pairs), len(cand), len(ref), count_chunks(pairs))


# ----------------------------------------------------------------------------- embedding F1


def greedy_match_f1(cand_emb: np.ndarray, ref_emb: np.ndarray) -> tuple[float, float, float]:
    """Precision, recall and F1 from greedy max-cosine token matching."""
    c = cand_emb / np.linalg.norm(cand_emb, axis=1, keepdims=True)
    r = ref_emb / np.linalg.norm(ref_emb, axis=1, keepdims=True)
    sim = c @ r.T
    precision = float(sim.max(axis=1).mean())
    recall = float(sim.max(axis=0).mean())
    # the harmonic mean is only meaningful when both sides share a sign
    if precision * recall <= 0:
        return precision, recall, 0.0
    f1 = 2 * precision * recall / (precision + recall)
    return precision, recall, float(np.clip(f1, -1.0, 1.0))


def semantic_f1(candidate: str, reference: str, backend: Backend, tokenizer: Callable[[str], list[str]] = DEFAULT_TOKENIZER) -> float:
    cand = tokenizer(candidate)
    ref = tokenizer(reference)
    if not cand or not ref:
        raise ValueError("semantic_f1 needs at least one token on each side")
    vocab = sorted(set(cand) | set(ref))
    table = dict(zip(vocab, (backend.embed_text(t) for t in vocab)))
    return greedy_match_f1(np.vstack([table[t] for t in cand]), np.vstack([table[t] for t in ref]))[2]


@dataclass
class MetricScores:
    bleu2: float
    meteor: float
    semantic_f1: float

    def to_dict(self) -> dict:
        return {"bleu2": self.bleu2, "meteor": self.meteor, "semantic_f1": self.semantic_f1}


def score_open(candidate: str, reference: str, backend: Backend, tokenizer: Callable[[str], list[str]] = DEFAULT_TOKENIZER) -> MetricScores:
    try:
        sem = semantic_f1(candidate, reference, backend, tokenizer)
    except ValueError:
        sem = 0.0
    return MetricScores(bleu2(candidate, reference, tokenizer), meteor_lite(candidate, reference, tokenizer), sem)


def load_metric_fixtures(path: str | Path) -> list[dict]:
    """Golden rows: ``{"candidate", "reference", "expected": {metric: value}}``."""
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
