"""Run configuration shared by every CLI command.

A run config is a JSON object with optional ``tracker``, ``scene`` and
``dataset`` sections plus a top-level ``seed``; omitted fields take their
defaults and unknown keys are rejected. Example::

    {"seed": 3, "tracker": {"steps": 800}, "scene": {"illum_jitter": 0.4}}
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SceneConfig
from .model import TrackerConfig


@dataclass
class DatasetConfig:
    n_sequences: int = 8

    def __post_init__(self):
        if self.n_sequences < 1:
            raise ValueError(f"n_sequences must be >= 1, got {self.n_sequences}")


@dataclass
class RunConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    seed: int = 0

    def __post_init__(self):
        self.apply_seed(self.seed)

    def apply_seed(self, seed: int) -> None:
        """The top-level seed drives model init, sampling and scene generation."""
        self.seed = int(seed)
        self.tracker.seed = self.seed
        self.scene.seed = self.seed

    def to_dict(self) -> dict:
        return {"seed": self.seed, "tracker": self.tracker.to_dict(), "scene": self.scene.to_dict(),
                "dataset": dataclasses.asdict(self.dataset)}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ValueError("run config must be a JSON object")
        unknown = sorted(set(data) - {"tracker", "scene", "dataset", "seed"})
        if unknown:
            raise ValueError(f"unknown run config keys: {unknown}")
        for section in ("tracker", "scene", "dataset"):
            if not isinstance(data.get(section, {}), dict):
                raise ValueError(f"config section {section!r} must be an object")
        seed = int(data.get("seed", 0))
        for section in ("tracker", "scene"):
            if "seed" in data.get(section, {}):
                raise ValueError(f"set the seed at top level, not inside {section!r}")
        ds = data.get("dataset", {})
        unknown_ds = sorted(set(ds) - {f.name for f in dataclasses.fields(DatasetConfig)})
        if unknown_ds:
            raise ValueError(f"unknown dataset config keys: {unknown_ds}")
        return cls(tracker=TrackerConfig.from_dict(dict(data.get("tracker", {}), seed=seed)),
                   scene=SceneConfig.from_dict(dict(data.get("scene", {}), seed=seed)),
                   dataset=DatasetConfig(**ds), seed=seed)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)
