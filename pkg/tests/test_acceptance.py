"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
from __future__ import annotations

import itertools
import random
import re
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from dualchain.backend import CachedBackend, MockBackend, ResponseCache
from dualchain.chains import CharacterChainNode, EventChainNode, answer_with_pcdcot, synthesize_dual_chain
from dualchain.datamodel import AnswerKey, CorpusError, Frame, FrameSequence, Option, Question, load_corpus, save_corpus, validate_corpus, validate_path
from dualchain.harness import (
    apply_split,
    assemble_prompt,
    largest_remainder,
    random_baseline,
    frequent_baseline,
    run_dir,
    run_eval,
    select,
    split_budget,
    stratified_split,
)
from dualchain.metrics import Tokenizer, bleu2, load_metric_fixtures, meteor_lite, semantic_f1
from dualchain.retrieval import RetrievalConfig, build_event_segments, maximal_runs, window_closure
from dualchain.runspec import RunSpec

from helpers import choice_question, corpus
from test_datamodel import MUTATIONS

pytestmark = pytest.mark.acceptance

GOLDEN = Path(__file__).parent / "data" / "metric_golden.jsonl"


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for a criterion, then fail the test if needed."""

    def report(n: int, name: str, ok: bool, detail: str = "") -> None:
        with capsys.disabled():
            print(f"\n[acceptance {n:2d}] {'PASS' if ok else 'FAIL'} {name}" + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {n} failed: {detail}"

    return report


# ------------------------------------------------------------------ 1


def brute_closure(seeds, delta, n) -> set[int]:
    # union of the clipped windows [i - delta, i + delta] around every seed
    return {j for i in seeds for j in range(max(0, i - delta), min(n, i + delta + 1))}


def brute_runs(members: set[int]) -> list[tuple[int, int]]:
    runs: list[list[int]] = []
    for j in sorted(members):
        if runs and j == runs[-1][1] + 1:
            runs[-1][1] = j
        else:
            runs.append([j, j])
    return [tuple(r) for r in runs]


ALL_FRAMES = tuple(Frame(i, i * 0.5, f"stub:f/{i}") for i in range(10_000))


def test_c1_closure_oracle(verdict):
    rng = random.Random(2024)
    mismatches = 0
    elapsed = 0.0
    for _ in range(1000):
        n = rng.randint(1, 10_000)
        seeds = sorted(rng.sample(range(n), min(n, rng.randint(0, 30))))
        delta = rng.randint(0, 20)
        expected_runs = brute_runs(brute_closure(seeds, delta, n))
        scores = np.zeros(n)
        scores[seeds] = 0.9
        t0 = time.perf_counter()
        mask = window_closure(seeds, delta, n)
        runs = maximal_runs(mask)
        (segs,) = build_event_segments(FrameSequence(ALL_FRAMES[:n]), ["ev"], RetrievalConfig(delta=delta), None, scores=scores[None, :])
        elapsed += time.perf_counter() - t0
        got = [(s.frame_indices[0], s.frame_indices[-1]) for s in segs]
        if runs != expected_runs or got != expected_runs:
            mismatches += 1
    verdict(1, "closure oracle equivalence", mismatches == 0 and elapsed < 5.0, f"{mismatches} mismatches, {elapsed:.2f}s")


# ------------------------------------------------------------------ 2

QUESTION = Question(
    "A-Q1", "T", 1, "plot_development", "multichoice", "What happened?",
    (Option("A", "Nothing."), Option("B", "Something.")), AnswerKey(label="B"),
)


def test_c2_participation_oracle(verdict):
    rng = random.Random(7)
    backend = MockBackend(0, dim=8)
    mismatches = 0
    for _ in range(500):
        events = []
        for j in range(rng.randint(1, 8)):
            a = round(rng.uniform(0, 100), 1)
            events.append(EventChainNode(f"E{j}", "ev", f"event {j}", (a, a + round(rng.uniform(0, 15), 1)), ()))
        chars = []
        for k in range(rng.randint(1, 6)):
            times = sorted(round(rng.uniform(0, 120), 1) for _ in range(rng.randint(1, 6)))
            # sometimes land exactly on an endpoint
            if rng.random() < 0.3:
                times = sorted(times + [rng.choice(events).interval[rng.randint(0, 1)]])
            chars.append(CharacterChainNode(f"C{k}", f"char {k}", tuple(times), ()))
        res = synthesize_dual_chain(events, chars, QUESTION, backend)
        oracle = [[any(e.interval[0] <= t <= e.interval[1] for t in c.appearance_times) for c in chars] for e in events]
        attached = [[c.character in n.characters for c in chars] for n in res.nodes]
        if res.participation != oracle or attached != oracle:
            mismatches += 1
    verdict(2, "dual-chain participation oracle", mismatches == 0, f"{mismatches} mismatches over 500 instances")


# ------------------------------------------------------------------ 3


def greedy_oracle(c: np.ndarray, r: np.ndarray) -> float:
    def cos(u, v):
        return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))

    p = sum(max(cos(ci, rj) for rj in r) for ci in c) / len(c)
    rec = sum(max(cos(ci, rj) for ci in c) for rj in r) / len(r)
    return 0.0 if p * rec <= 0 else 2 * p * rec / (p + rec)


def test_c3_metric_golden_suite(verdict):
    failures = []
    hand = [
        (bleu2("the cat sat", "the cat sat on the mat"), 0.3679),
        (meteor_lite("a b c", "a b c"), 0.9815),
    ]
    failures += [f"hand {got} vs {want}" for got, want in hand if abs(got - want) > 1e-4]
    rows = load_metric_fixtures(GOLDEN)
    if len(rows) != 50:
        failures.append(f"golden file has {len(rows)} rows")
    for row in rows:
        for name, fn in (("bleu2", bleu2), ("meteor", meteor_lite)):
            if abs(fn(row["candidate"], row["reference"]) - row["expected"][name]) > 1e-4:
                failures.append(f"golden {name} {row['candidate']!r}")
    vocab = "alpha beta gamma delta eps zeta eta theta iota kappa".split()
    tok = Tokenizer()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        mock = MockBackend(seed, dim=12)
        cand = " ".join(rng.choice(vocab, int(rng.integers(1, 7))))
        ref = " ".join(rng.choice(vocab, int(rng.integers(1, 7))))
        c = np.array([mock.embed_text(t) for t in tok(cand)])
        r = np.array([mock.embed_text(t) for t in tok(ref)])
        if abs(semantic_f1(cand, ref, mock) - greedy_oracle(c, r)) > 1e-6:
            failures.append(f"semantic_f1 fixture {seed}")
    verdict(3, "metric golden suite", not failures, "; ".join(failures[:5]) or "2 hand values, 50 golden pairs, 20 F1 fixtures")


# ------------------------------------------------------------------ 4


def test_c4_baseline_statistics(verdict):
    rng = np.random.default_rng(1)
    uniform = [choice_question(i, "ABCD"[rng.integers(4)], split="test") for i in range(400)]
    rand = random_baseline(corpus(uniform), "test", seed=0)
    skewed = []
    for split in ("train", "test"):
        for i in range(100):
            skewed.append(choice_question(len(skewed), "A" if i < 60 else "BCD"[i % 3], split=split))
    freq = frequent_baseline(corpus(skewed), "test")
    ok = rand.trials == 5 and abs(rand.overall - 0.25) <= 0.05 and freq.overall == pytest.approx(0.6)
    verdict(4, "baseline statistics", ok, f"random {rand.overall:.3f} over {rand.trials} trials, frequent {freq.overall:.3f}")


# ------------------------------------------------------------------ 5

SUBTASKS = ["actions", "motivations", "atmosphere", "label_purpose", "plot_development", "world_building"]


def test_c5_split_correctness(verdict):
    rng = random.Random(5)
    problems = []
    for trial in range(50):
        n_per = {sub: rng.randint(3, 80) for sub in rng.sample(SUBTASKS, rng.randint(1, len(SUBTASKS)))}
        qs, i = [], 0
        for sub, n in n_per.items():
            for _ in range(n):
                qs.append(choice_question(i, "A", subtask=sub))
                i += 1
        seed = rng.randint(0, 2**31)
        out = stratified_split(qs, seed=seed)
        if stratified_split(qs, seed=seed) != out:
            problems.append(f"trial {trial}: not deterministic")
        c = apply_split(corpus(qs), out)
        parts = [{q.id for q in select(c, s)} for s in ("train", "val", "test")]
        if sum(map(len, parts)) != len(qs) or set().union(*parts) != {q.id for q in qs}:
            problems.append(f"trial {trial}: not a partition")
        for sub, n in n_per.items():
            got = Counter(out[q.id] for q in qs if q.subtask == sub)
            if [got[s] for s in ("train", "val", "test")] != largest_remainder(n, (8, 1, 1)):
                problems.append(f"trial {trial}: stratum {sub} counts {dict(got)}")
    verdict(5, "split correctness", not problems, "; ".join(problems[:3]) or "50 random corpora")


# ------------------------------------------------------------------ 6


def test_c6_pcdcot_lift(synth, tmp_path, verdict):
    t0 = time.perf_counter()
    acc = {}
    for name, spec in {
        "plain": RunSpec(mode="plain"),
        "pcdcot": RunSpec(mode="pcdcot"),
        "no_cha_temp": RunSpec(mode="pcdcot", ablation="no_cha_temp"),
        "no_plot_event": RunSpec(mode="pcdcot", ablation="no_plot_event"),
    }.items():
        acc[name] = run_eval(synth.corpus, "all", spec, synth.mock()).overall
    elapsed = time.perf_counter() - t0
    targets = Counter(synth.truth["questions"][q.id]["target"] for q in synth.corpus.questions)
    ok = (
        min(targets.values()) > 0
        and acc["pcdcot"] - acc["plain"] >= 0.20
        and all(acc["plain"] < acc[a] < acc["pcdcot"] for a in ("no_cha_temp", "no_plot_event"))
        and elapsed < 60
    )
    detail = ", ".join(f"{k} {v:.3f}" for k, v in acc.items()) + f", {elapsed:.1f}s"
    verdict(6, "end-to-end lift over plain", ok, detail)


# ------------------------------------------------------------------ 7


def _section(prompt: str, tag: str) -> str:
    m = re.search(rf"<{tag}>\n.*?\n</{tag}>\n", prompt, re.S)
    return m.group(0) if m else ""


def test_c7_ablation_prompt_audit(synth, verdict):
    problems = []
    for q in synth.corpus.questions:
        full = answer_with_pcdcot(q, synth.corpus, RunSpec(mode="pcdcot"), synth.mock()).stage("synthesis")["prompt"]
        for ablation, gone, kept in (
            ("no_cha_temp", "character-temporal-chain", "plot-event-chain"),
            ("no_plot_event", "plot-event-chain", "character-temporal-chain"),
        ):
            rec = answer_with_pcdcot(q, synth.corpus, RunSpec(mode="pcdcot", ablation=ablation), synth.mock())
            prompt = rec.stage("synthesis")["prompt"]
            if f"<{gone}>" in prompt or "<dual-chain>" in prompt:
                problems.append(f"{q.id} {ablation}: removed section present")
            if not _section(full, kept) or _section(prompt, kept) != _section(full, kept):
                problems.append(f"{q.id} {ablation}: kept section differs")
    verdict(7, "ablation prompt audit", not problems, "; ".join(problems[:3]) or f"{len(synth.corpus.questions)} questions x 2 ablations")


# ------------------------------------------------------------------ 8

SECTION = re.compile(r"^<(frames|subtitles|theme-chara|prompt|question)>$", re.M)
ORDER = ["frames", "subtitles", "theme-chara", "prompt", "question"]
TAG_OF = {"F": "frames", "S": "subtitles", "TC": "theme-chara"}


def test_c8_modality_and_window_audit(verdict):
    problems = []
    c = corpus([choice_question(k, "A", ep=k) for k in range(1, 5)])
    for r in range(4):
        for extra in itertools.combinations(("F", "S", "TC"), r):
            mods = ("Q", *extra)
            for q in c.questions:
                req = assemble_prompt(q, c, RunSpec(modalities=mods)).request
                want = [t for t in ORDER if t in {TAG_OF[m] for m in extra} | {"prompt", "question"}]
                if SECTION.findall(req.text()) != want:
                    problems.append(f"{','.join(mods)}: sections {SECTION.findall(req.text())}")
    for q in c.questions:
        ep = q.episode_index
        for direction in ("Prev", "Next"):
            for i in (1, 2):
                asm = assemble_prompt(q, c, RunSpec(episode_window=f"{direction}_{i}", frame_budget=12))
                lo, hi = (ep - i, ep) if direction == "Prev" else (ep, ep + i)
                want = [k for k in range(lo, hi + 1) if 1 <= k <= 4]
                truncated = len(want) != i + 1
                text = asm.request.text()
                labels = [int(x) for x in re.findall(r"\[Episode (\d+)\]", text)]
                per_ep = Counter(int(ref.split("/ep")[1][:3]) for ref in asm.request.image_refs())
                if (
                    asm.episodes != want
                    or ("window_truncated" in asm.flags) != truncated
                    or labels != want + want
                    or per_ep != dict(zip(want, split_budget(12, want, ep)))
                    or SECTION.findall(text) != ORDER
                ):
                    problems.append(f"ep {ep} {direction}_{i}")
    verdict(8, "modality and window audit", not problems, "; ".join(problems[:3]) or "8 modality sets, 16 windows")


# ------------------------------------------------------------------ 9


def test_c9_determinism_and_cache(synth, tmp_path, verdict):
    spec = RunSpec(mode="pcdcot")
    outputs = {}
    inner_calls = {}
    for name, concurrency, cached in (("cold1", 1, True), ("warm8", 8, True), ("warm1", 1, True), ("nocache8", 8, False), ("nocache1", 1, False)):
        inner = synth.mock()
        backend = CachedBackend(inner, ResponseCache(tmp_path / "cache")) if cached else inner
        out = tmp_path / name
        run_eval(synth.corpus, "all", spec, backend, out_dir=out, concurrency=concurrency)
        d = run_dir(out, spec)
        outputs[name] = (d / "report.json").read_bytes() + (d / "report.md").read_bytes()
        inner_calls[name] = sum(inner.calls.values())
    identical = len(set(outputs.values())) == 1
    warm_free = inner_calls["warm8"] == inner_calls["warm1"] == 0
    verdict(9, "determinism and cache", identical and warm_free, f"{len(set(outputs.values()))} distinct reports, warm inner calls {inner_calls['warm8']}+{inner_calls['warm1']}")


# ------------------------------------------------------------------ 10


@pytest.mark.filterwarnings("ignore:stratum")
def test_c10_round_trip_and_validation(synth, tmp_path, verdict):
    problems = []
    if not validate_corpus(synth.corpus).ok:
        problems.append("synthetic corpus invalid")
    root = tmp_path / "base"
    save_corpus(synth.corpus, root)
    if load_corpus(root) != synth.corpus:
        problems.append("round trip changed the corpus")
    if len(MUTATIONS) != 20:
        problems.append(f"{len(MUTATIONS)} mutations declared")
    for name, (mutate, locus) in sorted(MUTATIONS.items()):
        target = tmp_path / name
        save_corpus(synth.corpus, target)
        mutate(target)
        report = validate_path(target)
        if report.ok or not any(locus in v.locus for v in report.violations):
            problems.append(f"{name} not caught at {locus}")
        try:
            load_corpus(target)
            problems.append(f"{name} loaded")
        except CorpusError:
            pass
    verdict(10, "corpus round trip and validation", not problems, "; ".join(problems[:3]) or "valid corpus, 20 mutations caught")
