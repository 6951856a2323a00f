"""Prompt templates and the tagged sections shared by every prompt builder.

Each section is wrapped in a tag (``<frames>``, ``<subtitles>``, ``<theme-chara>``,
``<prompt>``, ``<question>`` and the chain sections), so omitting a modality
removes the whole block and leaves nothing behind.
"""

from __future__ import annotations

import hashlib
import html
from pathlib import Path
from string import Template
from typing import Iterable, Sequence

from .backend import ImagePart, TextPart
from .datamodel import Episode, Question, Series

PROMPT_VERSION = "v1"
DEFAULT_PROMPT_DIR = Path(__file__).parent / "prompts" / PROMPT_VERSION

CHOICE_HINT = "Answer with the letter of the correct option in parentheses, for example (A), then stop."
OPEN_HINT = "Answer with one concise sentence that contains the answer."


class PromptTemplates:
    """Text assets with ``$name`` placeholders, loaded from a directory."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else DEFAULT_PROMPT_DIR
        self._templates = {p.stem: p.read_text(encoding="utf-8") for p in sorted(self.directory.glob("*.txt"))}
        if not self._templates:
            raise FileNotFoundError(f"no prompt templates in {self.directory}")

    def names(self) -> list[str]:
        return list(self._templates)

    def raw(self, name: str) -> str:
        return self._templates[name]

    def render(self, name: str, **values) -> str:
        return Template(self._templates[name]).substitute(**values).rstrip("\n")

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._templates):
            h.update(name.encode())
            h.update(self._templates[name].encode("utf-8"))
        return h.hexdigest()[:12]


def fmt_time(t: float) -> str:
    return f"{t:.2f}s"


def fmt_clock(t: float) -> str:
    m, s = divmod(t, 60)
    return f"{int(m):02d}:{s:04.1f}"


def section(tag: str, body: str) -> str:
    return f"<{tag}>\n{body}\n</{tag}>\n"


def format_hint(question: Question) -> str:
    return CHOICE_HINT if question.is_choice else OPEN_HINT


def render_question(question: Question) -> str:
    lines = [question.stem]
    for opt in question.options:
        lines.append(f"({opt.label}) {opt.text}")
    return "\n".join(lines)


def render_subtitles(episode: Episode) -> str:
    lines = []
    for cue in episode.subtitles:
        who = f"{cue.speaker}: " if cue.speaker else ""
        lines.append(f"[{fmt_clock(cue.start_s)}-{fmt_clock(cue.end_s)}] {who}{cue.text}")
    return "\n".join(lines) if lines else "(no subtitles)"


def render_theme_chara(series: Series) -> str:
    lines = [f"Theme: {series.theme_text}", "Characters:"]
    for prof in series.character_sheet:
        lines.append(f"- {prof.name}: {prof.description}" if prof.description else f"- {prof.name}")
    return "\n".join(lines)


def frame_parts(episodes: Sequence[Episode], frame_lists: Sequence[Sequence[int]], labelled: bool) -> list:
    """``<frames>`` block as request parts: text tags around image parts."""
    parts: list = [TextPart("<frames>\n")]
    for ep, positions in zip(episodes, frame_lists):
        if labelled:
            parts.append(TextPart(f"[Episode {ep.index}]\n"))
        for pos in positions:
            fr = ep.frames[pos]
            parts.append(TextPart(f"{fmt_time(fr.timestamp_s)} "))
            parts.append(ImagePart(fr.image_ref))
            parts.append(TextPart("\n"))
    parts.append(TextPart("</frames>\n"))
    return parts


def uniform_positions(n: int, k: int) -> list[int]:
    """Up to ``k`` evenly spread positions out of ``range(n)``, endpoints included."""
    if k <= 0 or n <= 0:
        return []
    if k >= n:
        return list(range(n))
    if k == 1:
        return [n // 2]
    return sorted({round(i * (n - 1) / (k - 1)) for i in range(k)})


def escape(text: str) -> str:
    return html.escape(text, quote=False)


def event_block(event_id: str, interval: tuple[float, float], description: str) -> str:
    start, end = interval
    return f'<event id="{event_id}" start="{fmt_time(start)}" end="{fmt_time(end)}">{escape(description)}</event>'


def character_block(name: str, times: Iterable[float], description: str) -> str:
    stamp = ", ".join(fmt_time(t) for t in times)
    return f'<character name="{html.escape(name)}" times="{stamp}">{escape(description)}</character>'
