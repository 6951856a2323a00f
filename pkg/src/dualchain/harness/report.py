"""Run reports: a deterministic fold over records, rendered as JSON or markdown.

Reports carry no timings or cache statistics, so a rerun against a warm
cache (or at a different concurrency level) produces identical bytes.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from statistics import fmean
from typing import Sequence

from ..datamodel import Question
from ..metrics import ParsedChoice, accuracy
from ..records import EvalRecord
from ..taxonomy import DIMENSION_ABBREV, DIMENSIONS, TaskTaxonomy

COLUMNS = ("VS", "SC", "AU", "AG", "CO", "Overall", "BL-2", "MET", "F1")
OPEN_METRICS = ("bleu2", "meteor", "semantic_f1")
_PRECISION = 6


def _r(x: float | None) -> float | None:
    return None if x is None else round(float(x), _PRECISION)


@dataclass
class RunReport:
    label: str
    spec: dict
    spec_digest: str
    split: str | None
    n_questions: int
    accuracy: dict
    open_metrics: dict
    failures: dict
    flags: dict = field(default_factory=dict)
    baselines: list = field(default_factory=list)
    prompt_digest: str = ""

    @property
    def overall(self) -> float | None:
        return self.accuracy["overall"]

    def dimension_accuracy(self, dim: str) -> float | None:
        return self.accuracy["per_dimension"][dim]["accuracy"]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _cells(d: dict) -> dict:
    return {"correct": d[0], "total": d[1], "accuracy": _r(d[0] / d[1]) if d[1] else None}


def build_report(
    label: str,
    spec: dict,
    spec_digest: str,
    split: str | None,
    questions: Sequence[Question],
    records: dict[str, EvalRecord],
    taxonomy: TaskTaxonomy,
    baselines: Sequence[dict] = (),
    prompt_digest: str = "",
) -> RunReport:
    """Fold records in question order; failed records count as incorrect."""
    choice = [q for q in questions if q.is_choice]
    open_qs = [q for q in questions if not q.is_choice]
    triples = [(ParsedChoice.from_dict(records[q.id].parsed), q.answer, q.subtask) for q in choice]
    if triples:
        acc = accuracy(triples, taxonomy)
        per_dim = {d: _cells(acc.per_dimension.get(d, (0, 0))) for d in DIMENSIONS}
        per_sub = {s: {**_cells(acc.per_subtask[s]), "dimension": taxonomy.dimension_of(s)} for s in sorted(acc.per_subtask)}
        acc_block = {
            "overall": _r(acc.overall),
            "correct": acc.correct,
            "total": acc.total,
            "unparsed": acc.unparsed,
            "per_dimension": per_dim,
            "per_subtask": per_sub,
        }
    else:
        acc_block = {
            "overall": None,
            "correct": 0,
            "total": 0,
            "unparsed": 0,
            "per_dimension": {d: _cells((0, 0)) for d in DIMENSIONS},
            "per_subtask": {},
        }
    open_block: dict = {"n": len(open_qs)}
    for m in OPEN_METRICS:
        vals = [records[q.id].scores.get(m, 0.0) for q in open_qs]
        open_block[m] = _r(fmean(vals)) if vals else None

    failed = [records[q.id] for q in questions if not records[q.id].ok]
    by_stage: dict[str, int] = {}
    for rec in failed:
        by_stage[rec.error["stage"]] = by_stage.get(rec.error["stage"], 0) + 1
    flags: dict[str, int] = {}
    for q in questions:
        for f in records[q.id].flags:
            flags[f] = flags.get(f, 0) + 1
    return RunReport(
        label=label,
        spec=spec,
        spec_digest=spec_digest,
        split=split,
        n_questions=len(questions),
        accuracy=acc_block,
        open_metrics=open_block,
        failures={"count": len(failed), "by_stage": dict(sorted(by_stage.items())), "question_ids": [r.question_id for r in failed]},
        flags=dict(sorted(flags.items())),
        baselines=list(baselines),
        prompt_digest=prompt_digest,
    )


def _pct(x: float | None) -> str:
    return "-" if x is None else f"{100 * x:.1f}"


def _row(name: str, dims: dict, overall, open_block: dict | None) -> str:
    cells = [_pct(dims.get(d)) for d in DIMENSIONS] + [_pct(overall)]
    cells += [_pct(open_block.get(m)) if open_block else "-" for m in OPEN_METRICS]
    return "| " + " | ".join([name, *cells]) + " |"


def render_markdown(report: RunReport) -> str:
    dims = {d: report.dimension_accuracy(d) for d in DIMENSIONS}
    lines = [
        "# Evaluation report",
        "",
        f"Run `{report.label}` (spec `{report.spec_digest}`), split `{report.split or 'all'}`, {report.n_questions} questions.",
        "",
        "| Method | " + " | ".join(COLUMNS) + " |",
        "|" + "---|" * (len(COLUMNS) + 1),
        _row(report.label, dims, report.overall, report.open_metrics if report.open_metrics["n"] else None),
    ]
    for b in report.baselines:
        lines.append(_row(b["name"].capitalize(), b["per_dimension"], b["overall"], None))
    lines += ["", "## Subtasks", "", "| Subtask | Dimension | Correct | Total | Acc |", "|---|---|---|---|---|"]
    for name, cell in report.accuracy["per_subtask"].items():
        dim = DIMENSION_ABBREV.get(cell.get("dimension", ""), "")
        lines.append(f"| {name} | {dim} | {cell['correct']} | {cell['total']} | {_pct(cell['accuracy'])} |")
    lines += ["", f"Unparsed answers: {report.accuracy['unparsed']}", f"Failures: {report.failures['count']}"]
    for stage, n in report.failures["by_stage"].items():
        lines.append(f"- {stage}: {n}")
    if report.flags:
        lines.append("Flags: " + ", ".join(f"{k}={v}" for k, v in report.flags.items()))
    return "\n".join(lines) + "\n"


def render_report(report: RunReport, fmt: str = "json") -> str:
    if fmt == "json":
        return report.to_json()
    if fmt in ("markdown", "md"):
        return render_markdown(report)
    raise ValueError(f"unknown report format {fmt!r}")


_ROW = re.compile(r"^\|(.+)\|\s*$")


def parse_markdown_table(text: str) -> dict[str, dict[str, float | None]]:
    """Read the main results table back into ``{method: {column: percent}}``."""
    out: dict[str, dict[str, float | None]] = {}
    header: list[str] | None = None
    for line in text.splitlines():
        m = _ROW.match(line.strip())
        if not m:
            if header is not None and out:
                break
            continue
        cells = [c.strip() for c in m.group(1).split("|")]
        if cells[0] == "Method":
            header = cells[1:]
            continue
        if header is None or set(cells[0]) <= {"-"}:
            continue
        out[cells[0]] = {h: (None if v == "-" else float(v)) for h, v in zip(header, cells[1:])}
    return out
