"""Run configuration with the desk and paper profiles."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .hpm import DESK_SCALES, FULL_SCALES

PROFILES: dict[str, dict[str, Any]] = {
    "desk": {
        "image_size": 96,
        "scales": [list(s) for s in DESK_SCALES],
        "c": 32,
        "high_channels": 64,
        "d": 16,
        "epochs": 10,
        "episodes_per_epoch": 32,
        "pairs_per_seed": 100,
        "samples_per_class": 8,
    },
    "paper": {
        "image_size": 240,
        "scales": [list(s) for s in FULL_SCALES],
        "c": 256,
        "high_channels": 512,
        "d": 300,
        "epochs": 200,
        "episodes_per_epoch": 1000,
        "pairs_per_seed": 1000,
        "samples_per_class": 20,
    },
}


@dataclass
class RunConfig:
    profile: str = "desk"
    image_size: int = 96
    scales: list[list[int]] = field(default_factory=lambda: [list(s) for s in DESK_SCALES])
    c: int = 32
    high_channels: int = 64
    d: int = 16
    margin: float = 0.5
    learning_rate: float = 5e-3
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 10
    episodes_per_epoch: int = 32
    steps: int | None = None
    episode_pool: int = 0
    shots: int = 1
    fold: int = 0
    n_folds: int = 4
    samples_per_class: int = 8
    # ablation switches
    hpm: bool = True
    gim: bool = True
    one_scale: bool = False
    info_channels: bool = True
    triplet_loss: bool = True
    word_embeddings: bool = True
    metric: str = "euclidean"
    stop_gradient_mined: bool = False
    refilter_each_stage: bool = False
    seg1_weights: list[float] | None = None
    # evaluation protocol
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    pairs_per_seed: int = 100
    iou_mode: str = "accumulate"
    # seeds and paths
    seed: int = 0
    data: str | None = None
    embeddings: str | None = None
    checkpoint: str | None = None
    out: str = "out"

    def __post_init__(self):
        if self.metric not in ("euclidean", "cosine"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.iou_mode not in ("accumulate", "per_episode"):
            raise ValueError(f"unknown iou mode {self.iou_mode!r}")

    @classmethod
    def for_profile(cls, profile: str = "desk", **overrides) -> "RunConfig":
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        values = dict(PROFILES[profile])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(profile=profile, **values)

    @property
    def active_scales(self) -> list[tuple[int, int]]:
        scales = [tuple(s) for s in self.scales]
        return scales[:1] if self.one_scale else scales

    def total_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * self.episodes_per_epoch // self.batch_size

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))
