from __future__ import annotations

import random
import re
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualchain.backend import BackendError, ChatRequest, MockBackend, MockRule
from dualchain.chains import (
    CharacterChainNode,
    EventChainNode,
    ExtractionFailed,
    ExtractionResult,
    answer_with_pcdcot,
    build_character_temporal_chain,
    build_plot_event_chain,
    extract_targets,
    parse_extraction,
    participates,
    participation_matrix,
    resolve_profiles,
    synthesize_dual_chain,
)
from dualchain.datamodel import (
    AnswerKey,
    CharacterProfile,
    Episode,
    Frame,
    FrameSequence,
    Option,
    Question,
    Series,
)
from dualchain.records import STAGE_ORDER
from dualchain.retrieval import CharacterTrack, EventSegment
from dualchain.runspec import PipelineConfig, RunSpec


def make_episode(n=40) -> Episode:
    frames = FrameSequence(tuple(Frame(i, float(i), f"stub:T/ep001/{i:04d}") for i in range(n)))
    return Episode("T", 1, frames, (), float(n))


def make_series() -> Series:
    sheet = (CharacterProfile("Yingyan", "a student"), CharacterProfile("Director", "the dorm director"), CharacterProfile("Sima Yi"))
    return Series("T", "Campus", "Campus life.", sheet, (make_episode(),))


QUESTION = Question(
    "T-Q1", "T", 1, "plot_development", "multichoice", "What happened?",
    (Option("A", "Nothing."), Option("B", "The exam was retaken.")), AnswerKey(label="B"),
)


def seg(eid, lo, hi, event="ev"):
    idx = tuple(range(lo, hi + 1))
    return EventSegment(eid, event, idx, (float(lo), float(hi)), idx)


def enode(eid, lo, hi, desc="d"):
    return EventChainNode(eid, "ev", desc, (float(lo), float(hi)), ())


def cnode(name, times, desc="c"):
    return CharacterChainNode(name, desc, tuple(sorted(times)), ())


class Recorder(MockBackend):
    """Mock that keeps every chat request it serves."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.requests: list[ChatRequest] = []

    def _chat(self, req):
        self.requests.append(req)
        return super()._chat(req)

    def prompts(self, stage):
        return [r.text() for r in self.requests if r.metadata.get("stage") == stage]


# ------------------------------------------------------------------ extraction


def test_extraction_scripted_example():
    mock = MockBackend(0, rules=[MockRule("Events: 1. exam retake\nCharacters: Yingyan, Director", stage="extract")])
    res = extract_targets(QUESTION, make_episode(), make_series(), mock)
    assert res.events == ["exam retake"]
    assert res.characters == ["Yingyan", "Director"]
    assert res.unresolved == []


def test_extraction_dedup():
    assert parse_extraction("Events: a\nCharacters: Yingyan, Yingyan", ["Yingyan"]).characters == ["Yingyan"]
    assert parse_extraction("Events:\n- the fight\n- The Fight\n").events == ["the fight"]


def test_extraction_resolves_case_and_flags_unknown():
    res = parse_extraction("Characters: yingyan and Ghost", ["Yingyan"])
    assert res.characters == ["Yingyan", "Ghost"] and res.unresolved == ["Ghost"]


@pytest.mark.parametrize(
    "raw",
    [
        "Events:\n1. exam retake\n2. dorm check\nCharacters:\n- Yingyan\n- Director",
        "**Events:** 1. exam retake 2. dorm check\n**Characters:** Yingyan; Director",
        "事件：\n1、exam retake\n2、dorm check\n人物：Yingyan、Director",
        'Sure! {"events": ["exam retake", "dorm check"], "characters": ["Yingyan", "Director"]}',
        "Key events:\n* exam retake.\n* dorm check\n\nKey characters: Yingyan, Director",
    ],
)
def test_extraction_tolerant_formats(raw):
    res = parse_extraction(raw, ["Yingyan", "Director"])
    assert res.events == ["exam retake", "dorm check"]
    assert res.characters == ["Yingyan", "Director"]


def test_extraction_none_markers():
    res = parse_extraction("Events: none\nCharacters: Yingyan", ["Yingyan"])
    assert res.events == [] and res.characters == ["Yingyan"]


def test_extraction_unparseable_carries_raw():
    with pytest.raises(ExtractionFailed) as ei:
        parse_extraction("I would rather talk about the weather.")
    assert ei.value.raw == "I would rather talk about the weather."


def test_resolve_profiles_sheet_order():
    ex = ExtractionResult([], ["Director", "Yingyan", "Ghost"], ["Ghost"])
    assert [p.name for p in resolve_profiles(ex, make_series())] == ["Yingyan", "Director", "Ghost"]


# ------------------------------------------------------------------ chains


def test_event_chain_orders_by_start():
    mock = MockBackend(0)
    nodes = build_plot_event_chain([[seg("E1", 12, 16)], [seg("E2", 3, 8)]], make_episode(), mock)
    assert [n.interval for n in nodes] == [(3.0, 8.0), (12.0, 16.0)]
    assert [n.event_id for n in nodes] == ["E2", "E1"]


def test_event_chain_multi_segment_ids_and_empty():
    mock = MockBackend(0)
    assert build_plot_event_chain([], make_episode(), mock) == []
    nodes = build_plot_event_chain([[seg("E1", 3, 8), seg("E1", 20, 22)]], make_episode(), mock)
    assert [n.event_id for n in nodes] == ["E1.1", "E1.2"]


def test_event_chain_scripted_description_and_frame_cap():
    rec = Recorder(0, rules=[MockRule("quilt inspection scene", stage="describe_event", contains=("3.00s", "8.00s"))])
    (node,) = build_plot_event_chain([[seg("E1", 3, 8)]], make_episode(), rec, PipelineConfig(frames_per_node=4))
    assert "quilt inspection scene" in node.description
    assert node.source_frames == tuple(range(3, 9))
    assert len(rec.requests[0].image_refs()) == 4


def test_event_node_interval_must_be_ordered():
    with pytest.raises(ValueError):
        EventChainNode("E1", "x", "d", (5.0, 1.0), ())


def test_character_chain_times_order_and_skips():
    mock = MockBackend(0)
    tracks = [
        CharacterTrack("Yingyan", (2, 9, 30), (2.0, 9.0, 30.0)),
        CharacterTrack("Ghost", (), ()),
        CharacterTrack("Director", (5,), (5.0,)),
    ]
    nodes = build_character_temporal_chain(tracks, make_episode(), mock)
    assert [n.character for n in nodes] == ["Yingyan", "Director"]
    assert nodes[0].appearance_times == (2.0, 9.0, 30.0)
    assert all(n.description for n in nodes)


def test_node_retry_then_failure():
    class Flaky(MockBackend):
        def __init__(self, fails):
            super().__init__(0)
            self.fails = fails

        def _chat(self, req):
            if self.fails:
                self.fails -= 1
                raise BackendError("boom")
            return super()._chat(req)

    cfg = PipelineConfig(node_retries=1)
    assert build_plot_event_chain([[seg("E1", 3, 8)]], make_episode(), Flaky(1), cfg)
    with pytest.raises(BackendError):
        build_plot_event_chain([[seg("E1", 3, 8)]], make_episode(), Flaky(2), cfg)


# ------------------------------------------------------------------ participation


def test_participation_examples():
    assert participates((10.0, 20.0), [5.0, 15.0])
    assert not participates((10.0, 20.0), [5.0, 25.0])
    assert participates((10.0, 20.0), [20.0])  # touching endpoint counts
    assert participates((10.0, 20.0), [10.0])
    assert not participates((10.0, 20.0), [])


def brute_participation(events, chars):
    return [[any(e.interval[0] <= t <= e.interval[1] for t in c.appearance_times) for c in chars] for e in events]


def test_participation_twenty_by_ten():
    rng = random.Random(4)
    events = []
    for j in range(20):
        a = rng.uniform(0, 100)
        events.append(enode(f"E{j}", a, a + rng.uniform(0, 15)))
    chars = [cnode(f"C{k}", [rng.uniform(0, 120) for _ in range(rng.randint(0, 6))]) for k in range(10)]
    assert participation_matrix(events, chars) == brute_participation(events, chars)


@given(
    st.lists(st.tuples(st.integers(0, 50), st.integers(0, 10)), max_size=8),
    st.lists(st.lists(st.integers(0, 60), max_size=5), max_size=6),
)
@settings(max_examples=200, deadline=None)
def test_participation_property(ivals, times):
    events = [enode(f"E{j}", a, a + w) for j, (a, w) in enumerate(ivals)]
    chars = [cnode(f"C{k}", [float(t) for t in ts]) for k, ts in enumerate(times)]
    assert participation_matrix(events, chars) == brute_participation(events, chars)


# ------------------------------------------------------------------ synthesis


def test_synthesis_dual_mode_prompt_structure():
    rec = Recorder(0)
    events = [enode("E1", 10, 20, "The quilt was praised."), enode("E2", 30, 40, "A spider appeared.")]
    chars = [cnode("Sima Yi", [15.0], "Sima Yi smiles."), cnode("Manager", [35.0], "The manager screams.")]
    res = synthesize_dual_chain(events, chars, QUESTION, rec)
    assert res.mode == "dual"
    assert [n.characters for n in res.nodes] == [["Sima Yi"], ["Manager"]]
    agg = rec.prompts("aggregate")
    assert len(agg) == 2
    assert "Sima Yi smiles." in agg[0] and "Manager" not in agg[0]
    # the mock merges the event and its characters; the merged text reaches the final prompt
    assert res.nodes[0].description == "The quilt was praised. Characters involved: Sima Yi: Sima Yi smiles."
    tags = re.findall(r"^<([a-z-]+)>$", res.prompt, re.M)
    assert tags == ["plot-event-chain", "character-temporal-chain", "dual-chain", "prompt", "question"]
    assert '<synthesis event="E2" characters="Manager">' in res.prompt


def test_synthesis_batched_aggregation():
    events = [enode("E1", 10, 20), enode("E2", 30, 40)]
    chars = [cnode("A", [15.0])]
    good = MockBackend(0, rules=[MockRule("[E1] merged one [E2] merged two", stage="aggregate")])
    res = synthesize_dual_chain(events, chars, QUESTION, good, PipelineConfig(aggregation="batched"))
    assert [n.description for n in res.nodes] == ["merged one", "merged two"]
    assert res.flags == []
    partial = MockBackend(0, rules=[MockRule("[E1] merged one", stage="aggregate")])
    res = synthesize_dual_chain(events, chars, QUESTION, partial, PipelineConfig(aggregation="batched"))
    assert res.flags == ["batched_parse_partial"]


def test_synthesis_single_chain_modes_skip_aggregation():
    rec = Recorder(0)
    res = synthesize_dual_chain([enode("E1", 1, 2)], [], QUESTION, rec)
    assert res.mode == "event_only" and rec.prompts("aggregate") == []
    assert "<character-temporal-chain>" not in res.prompt and "<dual-chain>" not in res.prompt
    res = synthesize_dual_chain([], [cnode("A", [1.0])], QUESTION, rec)
    assert res.mode == "character_only" and res.nodes == []
    assert "<plot-event-chain>" not in res.prompt


def test_synthesis_both_empty_falls_back_to_plain():
    rec = Recorder(0)
    res = synthesize_dual_chain([], [], QUESTION, rec)
    assert res.mode == "plain" and res.flags == ["fallback_plain"]
    assert "<plot-event-chain>" not in res.prompt and "<question>" in res.prompt


# ------------------------------------------------------------------ end to end


def _question(synth, target="event", fmt="multichoice"):
    for q in synth.corpus.questions:
        t = synth.truth["questions"][q.id]
        if t["target"] == target and q.format == fmt:
            return q
    raise AssertionError("fixture lacks question")


def test_full_run_has_five_stages_and_correct_answer(synth):
    q = _question(synth)
    rec = answer_with_pcdcot(q, synth.corpus, RunSpec(mode="pcdcot"), synth.mock())
    assert rec.ok, rec.error
    assert rec.stage_names == list(STAGE_ORDER)
    assert rec.raw_response == f"({q.answer.label})"
    assert rec.flags == []
    fact = synth.truth["questions"][q.id]["fact"]
    assert fact in rec.stage("synthesis")["prompt"]


def _section(prompt: str, tag: str) -> str:
    m = re.search(rf"<{tag}>\n.*?\n</{tag}>\n", prompt, re.S)
    return m.group(0) if m else ""


@pytest.mark.parametrize("ablation,gone,kept", [("no_cha_temp", "character-temporal-chain", "plot-event-chain"), ("no_plot_event", "plot-event-chain", "character-temporal-chain")])
def test_ablation_removes_one_chain(synth, ablation, gone, kept):
    q = _question(synth, "character")
    full = answer_with_pcdcot(q, synth.corpus, RunSpec(mode="pcdcot"), synth.mock())
    abl = answer_with_pcdcot(q, synth.corpus, RunSpec(mode="pcdcot", ablation=ablation), synth.mock())
    p_full, p_abl = full.stage("synthesis")["prompt"], abl.stage("synthesis")["prompt"]
    assert f"<{gone}>" not in p_abl and "<dual-chain>" not in p_abl
    assert _section(p_abl, kept) == _section(p_full, kept) != ""
    skipped = "character_chain" if ablation == "no_cha_temp" else "plot_event_chain"
    assert skipped not in abl.stage_names


def test_empty_events_degrade_to_character_only(synth):
    q = _question(synth, "character")
    mock = synth.mock()
    names = ", ".join(p.name for p in synth.corpus.get_series(q.series_id).character_sheet)
    mock.rules.insert(0, MockRule(f"Events: none\nCharacters: {names}", stage="extract"))
    rec = answer_with_pcdcot(q, synth.corpus, RunSpec(mode="pcdcot"), mock)
    assert "no_events_extracted" in rec.flags and "degraded:character_only" in rec.flags
    assert rec.stage("synthesis")["mode"] == "character_only"
    assert rec.stage("plot_event_chain") == []


def test_empty_tracks_degrade_to_event_only(synth):
    q = _question(synth)
    spec = RunSpec(mode="pcdcot").evolve(pipeline=replace(PipelineConfig(), retrieval=replace(PipelineConfig().retrieval, theta_c=1.0)))
    rec = answer_with_pcdcot(q, synth.corpus, spec, synth.mock())
    assert rec.stage("character_chain") == []
    assert rec.stage("synthesis")["mode"] == "event_only"
    assert "degraded:event_only" in rec.flags


def test_extraction_failure_falls_back_to_plain(synth):
    q = _question(synth)
    mock = synth.mock()
    mock.rules.insert(0, MockRule("no idea", stage="extract"))
    rec = answer_with_pcdcot(q, synth.corpus, RunSpec(mode="pcdcot"), mock)
    assert rec.ok and "extraction_failed" in rec.flags and "fallback_plain" in rec.flags
    assert rec.stage_names == ["extract", "synthesis"]


@pytest.mark.parametrize("stage,tag", [("extract", "extract"), ("describe_event", "plot_event_chain"), ("describe_character", "character_chain"), ("aggregate", "synthesis"), ("answer", "synthesis")])
def test_backend_failure_is_stage_tagged(synth, stage, tag):
    class Failing(MockBackend):
        def _chat(self, req):
            if req.metadata.get("stage") == stage:
                raise BackendError(f"{stage} down")
            return super()._chat(req)

    q = _question(synth)
    base = synth.mock()
    mock = Failing(base.seed, dim=base.dim, rules=base.rules, image_labels=base.image_labels, visual_facts=base.visual_facts)
    rec = answer_with_pcdcot(q, synth.corpus, RunSpec(mode="pcdcot"), mock)
    assert not rec.ok
    assert rec.error["stage"] == tag and rec.error["type"] == "BackendError"


def test_retrieve_failure_is_stage_tagged(synth):
    class NoEmbed(MockBackend):
        def _embed(self, req):
            raise BackendError("embeddings down")

    q = _question(synth)
    rec = answer_with_pcdcot(q, synth.corpus, RunSpec(mode="pcdcot"), NoEmbed(0, rules=synth.mock().rules))
    assert rec.error["stage"] == "retrieve"


def test_pipeline_deterministic_across_workers(synth):
    q = _question(synth, "character")
    a = answer_with_pcdcot(q, synth.corpus, RunSpec(mode="pcdcot"), synth.mock())
    spec8 = RunSpec(mode="pcdcot").evolve(pipeline=replace(PipelineConfig(), max_workers=8))
    b = answer_with_pcdcot(q, synth.corpus, spec8, synth.mock())
    da, db = a.to_dict(), b.to_dict()
    da.pop("timing_s"), db.pop("timing_s")
    assert da == db
