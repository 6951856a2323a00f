"""Experiment orchestration: splits, baselines, evaluation runs and reports."""

from ..assembly import PromptAssembly, assemble_prompt, split_budget, window_episodes
from ..runspec import ABLATIONS, MODALITIES, MODES, PipelineConfig, RunSpec, load_config_file
from .baselines import BaselineRow, frequent_baseline, heuristic_baseline, random_baseline
from .report import COLUMNS, RunReport, build_report, parse_markdown_table, render_markdown, render_report
from .run import answer_question, load_records, run_dir, run_eval, score_record
from .split import apply_split, derive_seed, largest_remainder, select, stratified_split

__all__ = [
    "ABLATIONS",
    "COLUMNS",
    "MODALITIES",
    "MODES",
    "BaselineRow",
    "PipelineConfig",
    "PromptAssembly",
    "RunReport",
    "RunSpec",
    "answer_question",
    "apply_split",
    "assemble_prompt",
    "build_report",
    "derive_seed",
    "frequent_baseline",
    "heuristic_baseline",
    "largest_remainder",
    "load_config_file",
    "load_records",
    "parse_markdown_table",
    "random_baseline",
    "render_markdown",
    "render_report",
    "run_dir",
    "run_eval",
    "score_record",
    "select",
    "split_budget",
    "stratified_split",
    "window_episodes",
]
