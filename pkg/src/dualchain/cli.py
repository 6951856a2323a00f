"""Command-line entry point: ``dualchain <verb> [options]``.

Settings resolve as CLI flags, then environment variables, then the config
file, then built-in defaults. Exit status is 0 on success, 1 when validation
or a run fails, and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .backend import ENV_API_KEY, ENV_CACHE, ENV_ENDPOINT, Backend, BackendConfig, BackendError, MockRule, make_backend
from .backend.cache import CachedBackend, ResponseCache
from .datamodel import (
    CorpusError,
    CorpusValidationError,
    annotation_from_dict,
    load_corpus,
    question_to_dict,
    read_jsonl,
    validate_path,
)
from .fixtures import GROUND_TRUTH_FILE, StorySpec, load_ground_truth, mock_from_ground_truth, write_synthetic_corpus
from .harness import (
    RunReport,
    RunSpec,
    heuristic_baseline,
    load_config_file,
    load_records,
    render_report,
    run_dir,
    run_eval,
)
from .harness.run import answer_question, score_record
from .harness.split import select
from .prompting import PromptTemplates
from .transform import generate_all, quality_sample

log = logging.getLogger("dualchain")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON run config")
    p.add_argument("--seed", type=int, help="root seed for every random choice")
    p.add_argument("--backend", choices=("mock", "http"), help="model backend")
    p.add_argument("--cache-dir", help="response cache directory")
    p.add_argument("--format", choices=("json", "markdown", "text"), help="output format")


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", help="corpus root (directory with corpus.json)")
    p.add_argument("--split", help="train, val, test or all")
    p.add_argument("--mode", choices=("plain", "pcdcot"))
    p.add_argument("--modalities", help="comma list drawn from Q,F,S,TC")
    p.add_argument("--episode-window", help="Prev_1, Prev_2, Next_1 or Next_2")
    p.add_argument("--ablation", choices=("none", "no_cha_temp", "no_plot_event"))
    p.add_argument("--frame-budget", type=int)
    p.add_argument("--concurrency", type=int, help="questions evaluated in parallel")
    p.add_argument("--trace", help="write per-question stage artifacts here")
    p.add_argument("--dump-retrieval", help="write similarity scores and retrieved segments here")
    p.add_argument("--prompts", help="prompt template directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualchain", description="Dual-chain narrative video QA pipeline and evaluation harness.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="verb")

    p = sub.add_parser("validate", help="check a corpus directory")
    p.add_argument("root")
    _common(p)

    p = sub.add_parser("synth", help="write a synthetic corpus with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--series", type=int)
    p.add_argument("--episodes", type=int)
    p.add_argument("--frames", type=int)
    _common(p)

    p = sub.add_parser("transform", help="generate questions from annotations")
    p.add_argument("--corpus", required=True)
    p.add_argument("--annotations", required=True, help="annotations JSONL")
    p.add_argument("--out", help="questions JSONL to append to (default: the corpus questions.jsonl)")
    p.add_argument("--formats", default="multichoice,judgment,open_ended")
    p.add_argument("--distractors", type=int, default=3)
    p.add_argument("--audit", type=int, default=0, help="quality-check a random sample of this size")
    p.add_argument("--verdicts", help="human verdict file for the audit")
    _common(p)

    p = sub.add_parser("infer", help="answer one question")
    p.add_argument("--question", required=True)
    _run_flags(p)
    _common(p)

    p = sub.add_parser("eval", help="evaluate a split and write a report")
    p.add_argument("--out", help="runs directory (default: runs)")
    p.add_argument("--baselines", action="store_true", help="add random and frequent rows")
    p.add_argument("--no-resume", action="store_true")
    _run_flags(p)
    _common(p)

    p = sub.add_parser("baseline", help="score a heuristic baseline")
    p.add_argument("--kind", choices=("random", "frequent"), required=True)
    p.add_argument("--corpus")
    p.add_argument("--split")
    _common(p)

    p = sub.add_parser("report", help="render a saved report")
    p.add_argument("path", help="report.json or a run directory")
    _common(p)
    return parser


# ---------------------------------------------------------------- settings


def _settings(args) -> dict:
    cfg = load_config_file(args.config) if getattr(args, "config", None) else {}
    return cfg if isinstance(cfg, dict) else {}


def _pick(cli, file_value, default=None):
    return cli if cli is not None else (file_value if file_value is not None else default)


def resolve_backend_config(args, settings: dict, env=os.environ) -> BackendConfig:
    """CLI > env > config file > defaults."""
    file_cfg = dict(settings.get("backend", {}))
    cfg = BackendConfig(**{k: v for k, v in file_cfg.items() if k in BackendConfig.__dataclass_fields__})
    env_values = {"endpoint": env.get(ENV_ENDPOINT), "api_key": env.get(ENV_API_KEY), "cache_dir": env.get(ENV_CACHE)}
    cfg = replace(cfg, **{k: v for k, v in env_values.items() if v})
    if getattr(args, "backend", None):
        cfg = replace(cfg, kind=args.backend)
    if getattr(args, "cache_dir", None):
        cfg = replace(cfg, cache_dir=args.cache_dir)
    seed = _pick(getattr(args, "seed", None), settings.get("seed"))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def resolve_run_spec(args, settings: dict, backend_cfg: BackendConfig) -> RunSpec:
    values = dict(settings.get("run", {}))
    for name in ("mode", "episode_window", "ablation", "frame_budget"):
        val = getattr(args, name, None)
        if val is not None:
            values[name] = val
    if getattr(args, "modalities", None):
        values["modalities"] = [m.strip() for m in args.modalities.split(",") if m.strip()]
    seed = _pick(getattr(args, "seed", None), settings.get("seed"))
    if seed is not None:
        values["seed"] = seed
    values.setdefault("backend_id", backend_cfg.kind if backend_cfg.kind == "mock" else f"http:{backend_cfg.chat_model}")
    return RunSpec.from_dict(values)


def build_backend(cfg: BackendConfig, corpus_root: Path | None) -> Backend:
    """Mock runs on a synthetic corpus pick up its planted ground truth."""
    if cfg.kind == "mock" and corpus_root is not None and (corpus_root / GROUND_TRUTH_FILE).exists():
        backend: Backend = mock_from_ground_truth(load_ground_truth(corpus_root), cfg.seed)
        if cfg.cache_dir:
            backend = CachedBackend(backend, ResponseCache(cfg.cache_dir))
        return backend
    options = dict(cfg.mock_options)
    if "rules_file" in options:
        rows = json.loads(Path(options.pop("rules_file")).read_text(encoding="utf-8"))
        options["rules"] = [MockRule.from_dict(r) for r in rows]
    return make_backend(replace(cfg, mock_options=options), image_root=corpus_root)


def _corpus_root(args, settings: dict) -> Path:
    root = _pick(getattr(args, "corpus", None), settings.get("corpus"))
    if root is None:
        raise ValueError("--corpus (or `corpus` in the config file) is required")
    return Path(root)


def _emit(obj, fmt: str | None) -> None:
    if isinstance(obj, str):
        sys.stdout.write(obj if obj.endswith("\n") else obj + "\n")
    else:
        sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def _write_json(path: str | Path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- verbs


def cmd_validate(args, settings) -> int:
    report = validate_path(args.root)
    if args.format == "json":
        _emit(report.to_dict(), "json")
    else:
        _emit(report.render(), "text")
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_synth(args, settings) -> int:
    base = StorySpec()
    spec = replace(
        base,
        seed=_pick(args.seed, settings.get("seed"), base.seed),
        n_series=_pick(args.series, settings.get("series"), base.n_series),
        episodes_per_series=_pick(args.episodes, settings.get("episodes"), base.episodes_per_series),
        frames_per_episode=_pick(args.frames, settings.get("frames"), base.frames_per_episode),
    )
    synth = write_synthetic_corpus(spec, args.out)
    _emit(
        {
            "out": str(Path(args.out)),
            "series": len(synth.corpus.series),
            "episodes": len(synth.corpus.episodes),
            "questions": len(synth.corpus.questions),
        },
        args.format,
    )
    return EXIT_OK


def cmd_transform(args, settings) -> int:
    root = Path(args.corpus)
    corpus = load_corpus(root)
    annotations = [annotation_from_dict(row, f"{args.annotations}[{i}]") for i, row in enumerate(read_jsonl(Path(args.annotations)))]
    backend = build_backend(resolve_backend_config(args, settings), root)
    formats = tuple(f.strip() for f in args.formats.split(",") if f.strip())
    questions, drops = generate_all(annotations, corpus, backend, target_formats=formats, distractor_count=args.distractors)
    out = Path(args.out) if args.out else root / "questions.jsonl"
    with open(out, "a", encoding="utf-8") as fh:
        for q in questions:
            fh.write(json.dumps(question_to_dict(q), ensure_ascii=False, sort_keys=True) + "\n")
    summary = {
        "generated": len(questions),
        "dropped": {aid: [{"format": d.format, "reason": d.reason} for d in ds] for aid, ds in drops.items()},
        "out": str(out),
    }
    if args.audit and questions:
        audit = quality_sample(questions, min(args.audit, len(questions)), _pick(args.seed, settings.get("seed"), 0), args.verdicts)
        summary["audit"] = audit.to_dict()
    _emit(summary, args.format)
    return EXIT_OK if questions else EXIT_FAIL


def _load_for_run(args, settings):
    root = _corpus_root(args, settings)
    corpus = load_corpus(root)
    backend_cfg = resolve_backend_config(args, settings)
    spec = resolve_run_spec(args, settings, backend_cfg)
    templates = PromptTemplates(_pick(getattr(args, "prompts", None), settings.get("prompts")))
    return root, corpus, backend_cfg, spec, templates


def cmd_infer(args, settings) -> int:
    root, corpus, backend_cfg, spec, templates = _load_for_run(args, settings)
    if args.mode is None and "mode" not in settings.get("run", {}):
        spec = spec.evolve(mode="pcdcot")
    backend = build_backend(backend_cfg, root)
    question = corpus.get_question(args.question)
    rec = score_record(answer_question(question, corpus, spec, backend, templates), question, backend)
    if args.trace:
        _write_json(args.trace, rec.to_dict())
    if args.dump_retrieval:
        retrieval = next((s["artifact"] for s in rec.stages if s["stage"] == "retrieve"), None)
        _write_json(args.dump_retrieval, retrieval)
    out = {"question_id": rec.question_id, "answer": rec.raw_response, "correct": rec.correct, "flags": rec.flags, "error": rec.error}
    _emit(out if args.format != "text" else (rec.raw_response or ""), args.format)
    return EXIT_OK if rec.ok else EXIT_FAIL


def cmd_eval(args, settings) -> int:
    root, corpus, backend_cfg, spec, templates = _load_for_run(args, settings)
    backend = build_backend(backend_cfg, root)
    split = _pick(args.split, settings.get("split"), "test")
    out_dir = Path(_pick(args.out, settings.get("out"), "runs"))
    concurrency = _pick(args.concurrency, settings.get("concurrency"), 1)
    if not select(corpus, split):
        log.error("split %r selects no questions", split)
        return EXIT_FAIL
    baselines = []
    if args.baselines:
        for kind in ("random", "frequent"):
            try:
                baselines.append(heuristic_baseline(kind, corpus, split, spec.seed).to_dict())
            except ValueError as exc:
                log.warning("baseline %s skipped: %s", kind, exc)
    report = run_eval(
        corpus,
        split,
        spec,
        backend,
        out_dir=out_dir,
        templates=templates,
        concurrency=concurrency,
        resume=not args.no_resume,
        baselines=baselines,
    )
    rdir = run_dir(out_dir, spec)
    if args.trace or args.dump_retrieval:
        records = load_records(rdir / "records.jsonl")
        for qid, rec in records.items():
            if args.trace:
                _write_json(Path(args.trace) / f"{qid}.json", rec.to_dict())
            if args.dump_retrieval:
                retrieval = next((s["artifact"] for s in rec.stages if s["stage"] == "retrieve"), None)
                if retrieval is not None:
                    _write_json(Path(args.dump_retrieval) / f"{qid}.json", retrieval)
    _emit(render_report(report, "json" if args.format == "json" else "markdown"), args.format)
    log.info("report written to %s", rdir)
    return EXIT_FAIL if report.failures["count"] else EXIT_OK


def cmd_baseline(args, settings) -> int:
    corpus = load_corpus(_corpus_root(args, settings))
    split = _pick(args.split, settings.get("split"), "test")
    row = heuristic_baseline(args.kind, corpus, split, _pick(args.seed, settings.get("seed"), 0))
    _emit(row.to_dict(), args.format)
    return EXIT_OK


def cmd_report(args, settings) -> int:
    path = Path(args.path)
    if path.is_dir():
        path = path / "report.json"
    report = RunReport.from_dict(json.loads(path.read_text(encoding="utf-8")))
    _emit(render_report(report, "json" if args.format == "json" else "markdown"), args.format)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "synth": cmd_synth,
    "transform": cmd_transform,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = _settings(args)
        return COMMANDS[args.verb](args, settings)
    except CorpusValidationError as exc:
        sys.stderr.write(exc.report.render() + "\n")
        return EXIT_FAIL
    except (CorpusError, BackendError, KeyError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_FAIL
    except ValueError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
