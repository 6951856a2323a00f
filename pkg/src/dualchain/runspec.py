"""Run configuration: what is evaluated, with which inputs, under which pipeline."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .retrieval import RetrievalConfig

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

MODALITIES = ("Q", "F", "S", "TC")
MODES = ("plain", "pcdcot")
ABLATIONS = ("no_cha_temp", "no_plot_event")
_WINDOW = re.compile(r"^(Prev|Next)_([12])$")


@dataclass(frozen=True)
class PipelineConfig:
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    extract_frames: int = 16
    frames_per_node: int = 8
    aggregation: str = "per_event"  # or "batched"
    node_retries: int = 1
    max_workers: int = 1
    max_tokens: int = 512
    temperature: float = 0.0

    def __post_init__(self):
        if self.aggregation not in ("per_event", "batched"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.frames_per_node < 1 or self.extract_frames < 0:
            raise ValueError("frame caps must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "retrieval" in d:
            d["retrieval"] = RetrievalConfig(**d["retrieval"])
        return cls(**d)


@dataclass(frozen=True)
class RunSpec:
    backend_id: str = "mock"
    mode: str = "plain"
    modalities: tuple[str, ...] = ("Q", "F", "S", "TC")
    episode_window: str | None = None
    ablation: str | None = None
    frame_budget: int = 32
    seed: int = 0
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        mods = tuple(m for m in MODALITIES if m in set(self.modalities))
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")
        if "Q" not in mods:
            raise ValueError("the question modality Q is always required")
        object.__setattr__(self, "modalities", mods)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.episode_window in ("", "none"):
            object.__setattr__(self, "episode_window", None)
        if self.episode_window is not None and not _WINDOW.match(self.episode_window):
            raise ValueError(f"episode_window must be Prev_1/Prev_2/Next_1/Next_2, got {self.episode_window!r}")
        if self.ablation in ("", "none"):
            object.__setattr__(self, "ablation", None)
        if self.ablation is not None:
            if self.ablation not in ABLATIONS:
                raise ValueError(f"ablation must be one of {ABLATIONS}")
            if self.mode != "pcdcot":
                raise ValueError("ablations only apply in pcdcot mode")
        if self.frame_budget < 0:
            raise ValueError("frame_budget must be >= 0")

    @property
    def window(self) -> tuple[str, int] | None:
        if self.episode_window is None:
            return None
        m = _WINDOW.match(self.episode_window)
        return m.group(1), int(m.group(2))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunSpec":
        d = dict(d)
        if "pipeline" in d:
            d["pipeline"] = PipelineConfig.from_dict(d["pipeline"])
        if "modalities" in d:
            mods = d["modalities"]
            d["modalities"] = tuple(mods.split(",") if isinstance(mods, str) else mods)
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def label(self) -> str:
        parts = [self.backend_id, self.mode, ",".join(self.modalities)]
        if self.episode_window:
            parts.append(self.episode_window)
        if self.ablation:
            parts.append(self.ablation)
        return " ".join(parts)

    def evolve(self, **changes) -> "RunSpec":
        return replace(self, **changes)


def load_config_file(path: str | Path) -> dict:
    """Read a TOML or JSON config into a plain dict."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return json.loads(text)
    return tomllib.loads(text)
