"""Episodic training loop with gradient accumulation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .autodiff import SgdConfig, Tape, sgd_step
from .episodes import Dataset, Episode, FoldSplit, ToyEncoder, sample_episode
from .model import MIANet

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "L_seg1", "L_seg2", "L_triplet", "total")


class NonFiniteLoss(RuntimeError):
    def __init__(self, step: int, losses: dict[str, float], episode: Episode):
        super().__init__(f"non-finite loss at step {step}: {losses}")
        self.step = step
        self.losses = losses
        self.episode = episode


@dataclass
class TrainLog:
    rows: list[dict[str, float]] = field(default_factory=list)
    triplet_skips: int = 0

    def totals(self) -> list[float]:
        return [r["total"] for r in self.rows]

    def to_csv(self) -> str:
        lines = [",".join(LOSS_COLUMNS)]
        for r in self.rows:
            lines.append(",".join([str(int(r["step"]))] + [repr(r[k]) for k in LOSS_COLUMNS[1:]]))
        return "\n".join(lines) + "\n"


def episode_stream(
    dataset: Dataset,
    split: FoldSplit,
    shots: int,
    encoder: ToyEncoder,
    seed: int,
    pool: int = 0,
) -> Iterator[Episode]:
    """Training episodes from the split's train classes.

    With ``pool > 0`` a fixed set of ``pool`` episodes is drawn once and cycled.
    """
    rng = np.random.default_rng([seed, 2])
    if pool:
        episodes = [sample_episode(dataset, split.train, shots, rng, encoder) for _ in range(pool)]
        while True:
            yield from episodes
    while True:
        yield sample_episode(dataset, split.train, shots, rng, encoder)


def train(
    model: MIANet,
    episodes: Iterator[Episode],
    sgd: SgdConfig,
    steps: int,
    on_step: Callable[[dict[str, float]], None] | None = None,
) -> TrainLog:
    """Run ``steps`` optimiser steps, each averaging ``sgd.batch_size`` episodes."""
    params = model.params
    for p in params:
        p.zero_grad()
    out = TrainLog()
    for step in range(1, steps + 1):
        sums = dict.fromkeys(LOSS_COLUMNS[1:], 0.0)
        for _ in range(sgd.batch_size):
            episode = next(episodes)
            tape = Tape()
            res = model.forward(episode, tape)
            losses = res.losses()
            if not all(math.isfinite(v) for v in losses.values()):
                raise NonFiniteLoss(step, losses, episode)
            out.triplet_skips += res.triplet_skipped
            tape.backward(res.total)
            for k, v in losses.items():
                sums[k] += v / sgd.batch_size
        for p in params:
            p.grad /= sgd.batch_size
        sgd_step(params, sgd)
        row = {"step": step, **sums}
        out.rows.append(row)
        if on_step is not None:
            on_step(row)
        if step % 50 == 0:
            log.info("step %d total %.4f", step, sums["total"])
    return out


def foreground_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    inter = np.logical_and(pred, truth).sum()
    union = np.logical_or(pred, truth).sum()
    return float(inter / union) if union else 1.0


def mean_query_iou(model: MIANet, episodes: Sequence[Episode]) -> float:
    return float(np.mean([foreground_iou(model.predict(e), e.query.mask) for e in episodes]))
