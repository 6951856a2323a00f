"""Task taxonomy: five dimensions, each split into sub-dimensions and leaf subtasks."""

from __future__ import annotations

from dataclasses import dataclass

DIMENSIONS = ("Visuals", "Script", "Audio", "Augmentation", "Comprehension")

# Column abbreviations used in report tables, in display order.
DIMENSION_ABBREV = {
    "Visuals": "VS",
    "Script": "SC",
    "Audio": "AU",
    "Augmentation": "AG",
    "Comprehension": "CO",
}

GENRES = (
    "Urban Life",
    "Romance",
    "Fantasy",
    "Counterattack",
    "Family",
    "Ancient Style",
    "Campus Life",
    "Anime",
    "Funny Daily",
    "Short Drama",
    "Food",
)


@dataclass(frozen=True)
class Subtask:
    name: str
    dimension: str
    group: str


# (leaf, dimension, sub-dimension); order follows the published enumeration.
_LEAVES = (
    ("actions", "Visuals", "Figures"),
    ("interactions", "Visuals", "Figures"),
    ("scene_transitions", "Visuals", "Scenes"),
    ("spatiotemporal_shifts", "Visuals", "Scenes"),
    ("object_presence", "Visuals", "Objects"),
    ("object_interaction", "Visuals", "Objects"),
    ("world_building", "Script", "Background"),
    ("time_and_location", "Script", "Background"),
    ("plot_development", "Script", "Plot"),
    ("foreshadowing_and_payoff", "Script", "Plot"),
    ("twists_and_conflicts", "Script", "Plot"),
    ("climaxes_and_buildups", "Script", "Plot"),
    ("suspense_and_continuity", "Script", "Plot"),
    ("emotional_dynamics", "Script", "Plot"),
    ("character_reference", "Script", "Characters"),
    ("motivations", "Script", "Characters"),
    ("dialogue_attribution", "Audio", "Dialogue"),
    ("pronoun_references", "Audio", "Dialogue"),
    ("tone_and_emotion", "Audio", "Dialogue"),
    ("atmosphere", "Audio", "Music"),
    ("sound_impact", "Audio", "Sound Effects"),
    ("subtitle_recognition", "Augmentation", "Subtitles"),
    ("label_purpose", "Augmentation", "Labels"),
    ("vfx_effectiveness", "Augmentation", "VFX"),
    ("future_predictions", "Comprehension", "Engagement"),
    ("current_interpretation", "Comprehension", "Engagement"),
    ("character_resonance", "Comprehension", "Empathy"),
)


@dataclass(frozen=True)
class TaskTaxonomy:
    dimensions: tuple[str, ...]
    subtasks: tuple[Subtask, ...]

    def dimension_of(self, leaf: str) -> str:
        for st in self.subtasks:
            if st.name == leaf:
                return st.dimension
        raise KeyError(f"unknown subtask {leaf!r}")

    def leaves(self) -> list[str]:
        return [st.name for st in self.subtasks]

    def leaves_of(self, dimension: str) -> list[str]:
        return [st.name for st in self.subtasks if st.dimension == dimension]

    def to_dict(self) -> dict:
        return {
            "dimensions": list(self.dimensions),
            "subtasks": [
                {"name": st.name, "dimension": st.dimension, "group": st.group}
                for st in self.subtasks
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaskTaxonomy":
        return cls(
            dimensions=tuple(data["dimensions"]),
            subtasks=tuple(
                Subtask(s["name"], s["dimension"], s.get("group", "")) for s in data["subtasks"]
            ),
        )


def default_taxonomy() -> TaskTaxonomy:
    return TaskTaxonomy(DIMENSIONS, tuple(Subtask(*row) for row in _LEAVES))
