"""Pipeline configuration as one JSON document."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .meshing import MeshingConfig
from .scene import SceneConfig
from .training import TrainConfig


@dataclass
class FieldConfig:
    pos_freqs: int = 10
    time_freqs: int = 6
    width: int = 64
    depth: int = 4


@dataclass
class PipelineConfig:
    data: str | None = None          # NeRF-synthetic directory; None synthesizes the translating disc
    output: str = "d2dgs_out"
    init_points: int = 5000          # random init when the dataset ships no points3d.ply
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    deformation: FieldConfig = field(default_factory=FieldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    meshing: MeshingConfig = field(default_factory=MeshingConfig)

    _SECTIONS = {"scene": SceneConfig, "deformation": FieldConfig, "train": TrainConfig,
                 "loss": LossWeights, "meshing": MeshingConfig}

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["scene"]["background"] = list(self.scene.background)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in raw.items():
            section = cls._SECTIONS.get(key)
            if section is None:
                kwargs[key] = value
                continue
            names = {f.name for f in dataclasses.fields(section)}
            bad = set(value) - names
            if bad:
                raise ValueError(f"unknown keys in [{key}]: {sorted(bad)}")
            kwargs[key] = section(**value)
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            return cls.from_json(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON ({exc.msg})") from None
