from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

STAGE_ORDER = ("extract", "retrieve", "plot_event_chain", "character_chain", "synthesis")


@dataclass
class EvalRecord:
    """Outcome of one question under one run spec.

    ``parsed`` is set for choice formats and ``open_text`` for open-ended ones.
    ``stages`` holds the PC-DCoT artifacts in execution order.
    """

    question_id: str
    format: str
    raw_response: str | None = None
    parsed: dict | None = None
    open_text: str | None = None
    correct: bool | None = None
    scores: dict = field(default_factory=dict)
    stages: list[dict] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    error: dict | None = None
    timing_s: float = 0.0
    cache_hit: bool = False

    def add_stage(self, name: str, artifact: Any) -> None:
        self.stages.append({"stage": name, "artifact": artifact})

    def stage(self, name: str) -> Any:
        for s in self.stages:
            if s["stage"] == name:
                return s["artifact"]
        raise KeyError(name)

    @property
    def stage_names(self) -> list[str]:
        return [s["stage"] for s in self.stages]

    def fail(self, stage: str, exc: BaseException) -> None:
        self.error = {"stage": stage, "type": type(exc).__name__, "message": str(exc)}

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        return cls(**d)
