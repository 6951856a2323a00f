"""Plain-mode prompt assembly.

Sections always appear in the order frames, subtitles, theme-chara, prompt,
question; modalities left out of the run spec are dropped entirely. A
``Prev_i``/``Next_i`` window adds the neighbouring episodes' frames and
subtitles in episode order and splits the frame budget across them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .backend import ChatRequest, TextPart
from .datamodel import Question, SeriesCorpus
from .prompting import (
    PromptTemplates,
    format_hint,
    frame_parts,
    render_question,
    render_subtitles,
    render_theme_chara,
    section,
    uniform_positions,
)
from .runspec import RunSpec


@dataclass
class PromptAssembly:
    request: ChatRequest
    episodes: list[int]
    flags: list[str] = field(default_factory=list)


def window_episodes(n_episodes: int, target: int, window: tuple[str, int] | None) -> tuple[list[int], bool]:
    """Episode indices covered by a window, and whether it was truncated."""
    if window is None:
        return [target], False
    direction, i = window
    if direction == "Prev":
        lo = max(1, target - i)
        return list(range(lo, target + 1)), target - i < 1
    hi = min(n_episodes, target + i)
    return list(range(target, hi + 1)), target + i > n_episodes


def split_budget(budget: int, episodes: list[int], target: int) -> list[int]:
    """Even split; any remainder goes to the target episode."""
    n = len(episodes)
    base, rem = divmod(budget, n)
    return [base + (rem if ep == target else 0) for ep in episodes]


def context_parts(
    question: Question,
    corpus: SeriesCorpus,
    modalities,
    episodes: list[int] | None = None,
    labelled: bool | None = None,
) -> list:
    """Subtitles and theme-chara sections only (the parts PC-DCoT reuses)."""
    series = corpus.get_series(question.series_id)
    episodes = episodes or [question.episode_index]
    if labelled is None:
        labelled = len(episodes) > 1
    parts: list = []
    if "S" in modalities:
        blocks = []
        for idx in episodes:
            body = render_subtitles(series.episode(idx))
            blocks.append(f"[Episode {idx}]\n{body}" if labelled else body)
        parts.append(TextPart(section("subtitles", "\n".join(blocks))))
    if "TC" in modalities:
        parts.append(TextPart(section("theme-chara", render_theme_chara(series))))
    return parts


def assemble_prompt(question: Question, corpus: SeriesCorpus, spec: RunSpec, templates: PromptTemplates | None = None) -> PromptAssembly:
    templates = templates or PromptTemplates()
    series = corpus.get_series(question.series_id)
    episodes, truncated = window_episodes(len(series.episodes), question.episode_index, spec.window)
    flags = ["window_truncated"] if truncated else []
    labelled = len(episodes) > 1 or spec.window is not None
    parts: list = []
    if "F" in spec.modalities:
        eps = [series.episode(i) for i in episodes]
        budgets = split_budget(spec.frame_budget, episodes, question.episode_index)
        positions = [uniform_positions(len(ep.frames), b) for ep, b in zip(eps, budgets)]
        parts.extend(frame_parts(eps, positions, labelled))
    parts.extend(context_parts(question, corpus, spec.modalities, episodes, labelled))
    if spec.window is not None:
        instruction = templates.render("multi_episode", target=question.episode_index, format_hint=format_hint(question))
    else:
        instruction = templates.render("evaluate", format_hint=format_hint(question))
    parts.append(TextPart(section("prompt", instruction)))
    parts.append(TextPart(section("question", render_question(question))))
    req = ChatRequest.user(
        parts,
        max_tokens=spec.pipeline.max_tokens,
        temperature=spec.pipeline.temperature,
        metadata={"stage": "answer", "question_id": question.id},
    )
    return PromptAssembly(req, episodes, flags)
