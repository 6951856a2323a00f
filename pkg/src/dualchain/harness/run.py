"""Evaluation runs: one record per question, written incrementally.

Records go to ``<out>/<spec-digest>/records.jsonl`` as they complete; a
rerun with the same spec reuses every successful record and retries the
rest. The report is folded in question order, so completion order and
concurrency level never change it.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from ..assembly import assemble_prompt
from ..backend import Backend
from ..chains import answer_with_pcdcot
from ..datamodel import Question, SeriesCorpus
from ..metrics import UNPARSED, ParsedChoice, parse_choice, score_open
from ..prompting import PromptTemplates
from ..records import EvalRecord
from ..runspec import RunSpec
from .report import RunReport, build_report, render_markdown
from .split import select

log = logging.getLogger(__name__)

RECORDS_FILE = "records.jsonl"


def run_dir(out_dir: str | Path, spec: RunSpec) -> Path:
    return Path(out_dir) / spec.digest()


def answer_question(question: Question, corpus: SeriesCorpus, spec: RunSpec, backend: Backend, templates: PromptTemplates) -> EvalRecord:
    """Unscored record for one question; exceptions become record errors."""
    t0 = time.perf_counter()
    if spec.mode == "pcdcot":
        rec = answer_with_pcdcot(question, corpus, spec, backend, templates)
    else:
        rec = EvalRecord(question.id, question.format)
        try:
            asm = assemble_prompt(question, corpus, spec, templates)
            rec.flags.extend(asm.flags)
            resp = backend.chat(asm.request)
            rec.raw_response = resp.text
            rec.cache_hit = resp.cached
        except Exception as exc:  # keep the run going; the tally reports it
            log.warning("question %s failed: %s", question.id, exc)
            rec.fail("answer", exc)
    rec.timing_s = time.perf_counter() - t0
    return rec


def score_record(rec: EvalRecord, question: Question, backend: Backend) -> EvalRecord:
    """Fill the parsed choice (choice formats) or the open text and metrics."""
    raw = rec.raw_response or ""
    if question.is_choice:
        parsed = parse_choice(raw, question.options) if rec.ok else ParsedChoice(UNPARSED, "error", raw)
        rec.parsed = parsed.to_dict()
        rec.correct = parsed.parsed and parsed.label == question.answer.label
    else:
        rec.open_text = raw
        try:
            rec.scores = score_open(raw, question.answer.reference_text, backend).to_dict()
        except Exception as exc:
            rec.scores = {"bleu2": 0.0, "meteor": 0.0, "semantic_f1": 0.0}
            if rec.ok:
                rec.fail("score", exc)
    return rec


def load_records(path: Path) -> dict[str, EvalRecord]:
    """Latest record per question id; unreadable lines are skipped."""
    out: dict[str, EvalRecord] = {}
    if not path.exists():
        return out
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            try:
                rec = EvalRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, TypeError):
                continue
            out[rec.question_id] = rec
    return out


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def run_eval(
    corpus: SeriesCorpus,
    split: str | None,
    spec: RunSpec,
    backend: Backend,
    *,
    out_dir: str | Path | None = None,
    templates: PromptTemplates | None = None,
    concurrency: int = 1,
    resume: bool = True,
    baselines: Sequence[dict] = (),
) -> RunReport:
    templates = templates or PromptTemplates()
    questions = select(corpus, split)
    records_path = run_dir(out_dir, spec) / RECORDS_FILE if out_dir is not None else None
    done: dict[str, EvalRecord] = {}
    if records_path is not None and resume:
        done = {qid: r for qid, r in load_records(records_path).items() if r.ok}
    if records_path is not None:
        records_path.parent.mkdir(parents=True, exist_ok=True)
    lock = threading.Lock()

    def work(q: Question) -> EvalRecord:
        if q.id in done:
            return done[q.id]
        rec = score_record(answer_question(q, corpus, spec, backend, templates), q, backend)
        if records_path is not None:
            with lock, open(records_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
        return rec

    if concurrency > 1:
        with ThreadPoolExecutor(concurrency) as pool:
            results = list(pool.map(work, questions))
    else:
        results = [work(q) for q in questions]
    records = {r.question_id: r for r in results}

    report = build_report(
        spec.label(),
        spec.to_dict(),
        spec.digest(),
        split,
        questions,
        records,
        corpus.taxonomy,
        baselines,
        templates.digest(),
    )
    if records_path is not None:
        lines = "".join(json.dumps(records[q.id].to_dict(), ensure_ascii=False, sort_keys=True) + "\n" for q in questions)
        _atomic_write(records_path, lines)
        _atomic_write(records_path.parent / "report.json", report.to_json())
        _atomic_write(records_path.parent / "report.md", render_markdown(report))
    return report
