"""Deterministic synthetic series with planted events, characters and answers.

Every episode gets a few contiguous event intervals and a handful of scattered
character appearances. Frames carry no pixels: each frame's image ref is a
``stub:`` whose mock embedding is built from the labels planted on it (event
label and/or character names), so threshold retrieval has a clean signal.
Planted fact sentences are attached to the same frames as mock "visual
facts"; questions ask about them, and a ``ground_truth.json`` sidecar records
everything needed to check retrieval, chains and answers without running
the pipeline.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backend import MockBackend, MockRule
from .datamodel import (
    AnswerKey,
    CharacterProfile,
    Episode,
    Frame,
    FrameSequence,
    Option,
    Question,
    Series,
    SeriesCorpus,
    SubtitleCue,
    episode_dir,
    save_corpus,
)
from .harness.split import apply_split, stratified_split
from .taxonomy import DIMENSIONS, GENRES, default_taxonomy

GROUND_TRUTH_FILE = "ground_truth.json"

NAMES = ["Mira", "Tobin", "Yara", "Ansel", "Lio", "Petra", "Juno", "Cass", "Oren", "Wren", "Dario", "Nell", "Ilse", "Rafe", "Sunny"]
ROLES = ["a restless student", "a retired sailor", "a night-shift nurse", "a street musician", "a dorm manager", "a young chef"]
PLACES = ["harbour", "market", "rooftop", "library", "orchard", "station", "bakery", "courtyard", "garden", "dormitory", "theatre", "riverside"]
OCCASIONS = ["festival", "quarrel", "rehearsal", "auction", "reunion", "chase", "inspection", "banquet", "storm", "wedding"]
OBJECTS = [
    "lantern", "umbrella", "violin", "letter", "compass", "teapot", "scarf", "camera", "ledger", "kite", "mirror", "locket",
    "trumpet", "quilt", "map", "ribbon", "hourglass", "basket", "key", "notebook", "parasol", "medal", "puppet", "vase",
]
ACTORS = ["a stranger", "the courier", "an old neighbour", "the shopkeeper", "a child"]
EVENT_VERBS = ["drops", "repairs", "hides", "steals", "paints", "breaks", "returns", "wraps"]
CHAR_VERBS = ["carries", "guards", "polishes", "searches for", "sketches", "gives away"]
LINES = [
    "Did you hear that?", "We should go.", "Not now.", "I will be back soon.", "Look over there.",
    "Nobody told me.", "It is getting late.", "Are you sure?",
]


@dataclass(frozen=True)
class StorySpec:
    seed: int = 7
    n_series: int = 3
    episodes_per_series: int = 4
    frames_per_episode: int = 60
    events_per_episode: int = 2
    event_length: tuple[int, int] = (6, 10)
    characters_per_series: int = 3
    appearances_per_character: int = 3
    questions_per_episode: int = 3
    formats: tuple[str, ...] = ("multichoice", "judgment", "open_ended")
    subtasks_per_dimension: int = 2
    frame_step_s: float = 1.0
    gap: int = 6  # minimum background frames around each planted event
    label_noise: float = 0.1

    def check(self) -> None:
        lo, hi = self.event_length
        if not 1 <= lo <= hi:
            raise ValueError(f"bad event_length {self.event_length}")
        if self.events_per_episode < 1:
            raise ValueError("need at least one event per episode")
        slot = self.frames_per_episode // self.events_per_episode
        if slot < hi + self.gap:
            raise ValueError(
                f"{self.events_per_episode} events of up to {hi} frames with gap {self.gap} "
                f"do not fit in {self.frames_per_episode} frames"
            )
        free = self.frames_per_episode - self.events_per_episode * (hi + self.gap)
        if self.appearances_per_character - 1 > free:
            raise ValueError("more character appearances than background frames")
        if self.characters_per_series * self.n_series > len(NAMES):
            raise ValueError(f"at most {len(NAMES)} distinct characters are available")
        if self.events_per_episode + self.characters_per_series + 3 > len(OBJECTS):
            raise ValueError("not enough distinct objects for facts and distractors")
        if self.events_per_episode > len(PLACES) * len(OCCASIONS):
            raise ValueError("too many events for the label pool")
        if self.characters_per_series < 1 or self.questions_per_episode < 0:
            raise ValueError("need at least one character")
        if not set(self.formats) <= {"multichoice", "judgment", "open_ended"} or not self.formats:
            raise ValueError(f"bad formats {self.formats}")


@dataclass
class SyntheticCorpus:
    corpus: SeriesCorpus
    truth: dict = field(repr=False)

    def mock(self, seed: int | None = None) -> MockBackend:
        return mock_from_ground_truth(self.truth, seed)


def _episode_key(series_id: str, index: int) -> str:
    return f"{series_id}/{index}"


def _interleaved_leaves(per_dim: int) -> list[str]:
    tax = default_taxonomy()
    cols = [tax.leaves_of(d)[:per_dim] for d in DIMENSIONS]
    return [col[i] for i in range(per_dim) for col in cols if i < len(col)]


def generate_synthetic_corpus(spec: StorySpec = StorySpec()) -> SyntheticCorpus:
    spec.check()
    rng = np.random.default_rng(spec.seed)
    names_pool = [NAMES[i] for i in rng.permutation(len(NAMES))]
    leaves = _interleaved_leaves(spec.subtasks_per_dimension)
    step = spec.frame_step_s
    n = spec.frames_per_episode

    truth: dict = {
        "spec": json.loads(json.dumps(asdict(spec))),  # tuples as lists, as in the sidecar
        "episodes": {},
        "questions": {},
        "extraction": {},
        "image_labels": {},
        "visual_facts": {},
    }
    series_list = []
    questions = []
    counter = 0
    for si in range(spec.n_series):
        sid = f"S{si + 1:02d}"
        genre = GENRES[si % len(GENRES)]
        names = names_pool[si * spec.characters_per_series : (si + 1) * spec.characters_per_series]
        sheet = tuple(
            CharacterProfile(nm, f"{nm}, {ROLES[int(rng.integers(len(ROLES)))]}", f"stub:portrait/{sid}/{nm}")
            for nm in names
        )
        for prof in sheet:
            truth["image_labels"][prof.portrait_ref] = [prof.name]
        episodes = []
        for ei in range(1, spec.episodes_per_series + 1):
            key = _episode_key(sid, ei)
            refs = [f"stub:{episode_dir(sid, ei)}/{k:04d}" for k in range(n)]
            labels: list[list[str]] = [[] for _ in range(n)]
            facts: list[list[list[str]]] = [[] for _ in range(n)]
            objects = [OBJECTS[i] for i in rng.permutation(len(OBJECTS))]
            used_objects = 0

            # events: one per equal-width slot, kept `gap` frames from slot edges
            slot = n // spec.events_per_episode
            combos = [(p, o) for p in PLACES for o in OCCASIONS]
            picks = rng.choice(len(combos), size=spec.events_per_episode, replace=False)
            events = []
            for j in range(spec.events_per_episode):
                length = int(rng.integers(spec.event_length[0], spec.event_length[1] + 1))
                lo = j * slot + spec.gap // 2
                hi = (j + 1) * slot - (spec.gap - spec.gap // 2) - length
                start = int(rng.integers(lo, hi + 1))
                end = start + length - 1
                place, occasion = combos[int(picks[j])]
                label = f"the {place} {occasion}"
                obj = objects[used_objects]
                used_objects += 1
                actor = ACTORS[int(rng.integers(len(ACTORS)))]
                verb = EVENT_VERBS[int(rng.integers(len(EVENT_VERBS)))]
                fact = f"During {label}, {actor} {verb} the {obj}."
                for k in range(start, end + 1):
                    labels[k].append(label)
                    facts[k].append([label, fact])
                events.append(
                    {
                        "event_id": f"E{j + 1}",
                        "label": label,
                        "frames": [start, end],
                        "interval": [round(start * step, 3), round(end * step, 3)],
                        "fact": fact,
                        "object": obj,
                    }
                )

            # background appearances stay clear of the retrieval window around events
            margin = spec.gap // 2
            near_event = {k for e in events for k in range(e["frames"][0] - margin, e["frames"][1] + margin + 1)}
            background = [k for k in range(n) if k not in near_event]
            characters = []
            for ci, prof in enumerate(sheet):
                host = events[ci % len(events)]
                inside = int(rng.integers(host["frames"][0], host["frames"][1] + 1))
                outside = rng.choice(background, size=spec.appearances_per_character - 1, replace=False).tolist()
                frames = sorted({inside, *map(int, outside)})
                obj = objects[used_objects]
                used_objects += 1
                verb = CHAR_VERBS[int(rng.integers(len(CHAR_VERBS)))]
                fact = f"{prof.name} {verb} the {obj} whenever they appear."
                for k in frames:
                    labels[k].append(prof.name)
                    facts[k].append([prof.name, fact])
                characters.append(
                    {
                        "name": prof.name,
                        "frames": frames,
                        "times": [round(k * step, 3) for k in frames],
                        "fact": fact,
                        "object": obj,
                        "events": [e["event_id"] for e in events if any(e["frames"][0] <= k <= e["frames"][1] for k in frames)],
                    }
                )
            distractors = objects[used_objects:]

            for k, ref in enumerate(refs):
                if labels[k]:
                    truth["image_labels"][ref] = labels[k]
                    truth["visual_facts"][ref] = facts[k]

            cues = []
            for c in range(4):
                start_s = round((c * n / 4 + 1) * step, 3)
                cues.append(
                    SubtitleCue(
                        start_s,
                        round(start_s + 2 * step, 3),
                        LINES[int(rng.integers(len(LINES)))],
                        sheet[int(rng.integers(len(sheet)))].name,
                    )
                )
            frame_seq = FrameSequence(tuple(Frame(k, round(k * step, 3), refs[k]) for k in range(n)))
            episodes.append(Episode(sid, ei, frame_seq, tuple(cues), round(n * step, 3)))
            truth["episodes"][key] = {"events": events, "characters": characters}

            extraction = "Events:\n" + "\n".join(f"{j + 1}. {e['label']}" for j, e in enumerate(events))
            extraction += "\nCharacters: " + ", ".join(p.name for p in sheet)
            for _ in range(spec.questions_per_episode):
                fmt = spec.formats[counter % len(spec.formats)]
                target = "event" if counter % 2 == 0 else "character"
                subtask = leaves[counter % len(leaves)]
                qid = f"{sid}-E{ei:02d}-Q{counter:03d}"
                if target == "event":
                    item = events[(counter // 2) % len(events)]
                    subject, about = item["label"], f"during {item['label']}"
                else:
                    item = characters[(counter // 2) % len(characters)]
                    subject, about = item["name"], f"for {item['name']}"
                q, answer, wrong = _make_question(qid, sid, ei, subtask, fmt, target, subject, about, item, distractors, counter, rng)
                questions.append(q)
                truth["questions"][qid] = {
                    "target": target,
                    "subject": subject,
                    "fact": item["fact"],
                    "format": fmt,
                    "answer": answer,
                    "wrong": wrong,
                    "reference": q.answer.reference_text,
                }
                truth["extraction"][qid] = extraction
                counter += 1
        article = "an" if genre[0] in "AEIOU" else "a"
        theme = f"{article.capitalize()} {genre.lower()} story following {', '.join(names)} through one turbulent season."
        series_list.append(Series(sid, genre, theme, sheet, tuple(episodes)))

    corpus = SeriesCorpus(tuple(series_list), default_taxonomy(), tuple(questions))
    corpus = apply_split(corpus, stratified_split(corpus.questions, seed=spec.seed))
    return SyntheticCorpus(corpus, truth)


def _make_question(qid, sid, ei, subtask, fmt, target, subject, about, item, distractors, counter, rng):
    obj = item["object"]
    noun = "event" if target == "event" else "character"
    if fmt == "multichoice":
        wrong_objs = list(distractors[:3])
        pos = int(rng.integers(4))
        texts = wrong_objs[:pos] + [obj] + wrong_objs[pos:]
        options = tuple(Option(lbl, f"the {t}") for lbl, t in zip("ABCD", texts))
        answer = "ABCD"[pos]
        wrong = next(o.label for o in options if o.label != answer)
        stem = f"In episode {ei}, which object matters most {about}?"
        return Question(qid, sid, ei, subtask, fmt, stem, options, AnswerKey(label=answer)), answer, wrong
    if fmt == "judgment":
        truthful = (counter // 6) % 2 == 0
        shown = obj if truthful else distractors[0]
        stem = f"True or false: in episode {ei}, the {shown} is the key object {about}."
        options = (Option("A", "True"), Option("B", "False"))
        answer = "A" if truthful else "B"
        return Question(qid, sid, ei, subtask, fmt, stem, options, AnswerKey(label=answer)), answer, "B" if truthful else "A"
    stem = f"In episode {ei}, what happens {about}? Describe the {noun}'s key action."
    return Question(qid, sid, ei, subtask, fmt, stem, (), AnswerKey(reference_text=item["fact"])), None, None


UNKNOWN_ANSWER = "I am not sure what happens."


def planted_rules(truth: dict) -> list[MockRule]:
    """Scripted extraction plus answers that are right iff the fact is in the prompt."""
    rules = []
    for qid, text in truth["extraction"].items():
        rules.append(MockRule(text, stage="extract", question_id=qid))
    for qid, gt in truth["questions"].items():
        if gt["format"] == "open_ended":
            right, wrong = gt["fact"], UNKNOWN_ANSWER
        else:
            right, wrong = f"({gt['answer']})", f"({gt['wrong']})"
        rules.append(MockRule(right, stage="answer", question_id=qid, contains=(gt["fact"],)))
        rules.append(MockRule(wrong, stage="answer", question_id=qid))
    return rules


def mock_from_ground_truth(truth: dict, seed: int | None = None, *, rules: bool = True) -> MockBackend:
    spec = truth["spec"]
    return MockBackend(
        spec["seed"] if seed is None else seed,
        rules=planted_rules(truth) if rules else (),
        image_labels=truth["image_labels"],
        visual_facts={k: [tuple(x) for x in v] for k, v in truth["visual_facts"].items()},
        noise=spec["label_noise"],
    )


def write_synthetic_corpus(spec: StorySpec, out: str | Path) -> SyntheticCorpus:
    synth = generate_synthetic_corpus(spec)
    root = save_corpus(synth.corpus, out)
    (root / GROUND_TRUTH_FILE).write_text(json.dumps(synth.truth, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    synth.corpus = SeriesCorpus(synth.corpus.series, synth.corpus.taxonomy, synth.corpus.questions, root)
    return synth


def load_ground_truth(root: str | Path) -> dict:
    return json.loads((Path(root) / GROUND_TRUTH_FILE).read_text(encoding="utf-8"))
