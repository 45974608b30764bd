"""The full network: prior pyramid + general prototype + fusion head."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Var
from .config import RunConfig
from .episodes import Episode, kshot_aggregate
from .gim import (
    GigNetwork,
    LfgNetwork,
    TripletSample,
    WordEmbeddingTable,
    general_prototype,
    hardest_positive_index,
    lookup_embedding,
    partition_regions,
    region_features,
    region_grid,
    support_prototype,
    triplet_loss,
)
from .hpm import HpmConfig, PriorPyramid, build_prior_pyramid
from .ifm import FusionBlock, PredictionSet, expand_inputs, fuse_and_predict, segmentation_losses, total_loss
from .tensor import resize_bilinear


@dataclass
class SupportInfo:
    pyramid: PriorPyramid
    prototype: np.ndarray
    pyramids: list[PriorPyramid]
    prototypes: list[np.ndarray]
    empty_foreground: bool


@dataclass
class ForwardResult:
    preds: PredictionSet
    p_gen: Var
    support: SupportInfo
    seg1: Var | None = None
    seg2: Var | None = None
    triplet: Var | None = None
    total: Var | None = None
    triplet_skipped: bool = False

    def losses(self) -> dict[str, float]:
        return {
            "L_seg1": self.seg1.item(),
            "L_seg2": self.seg2.item(),
            "L_triplet": self.triplet.item(),
            "total": self.total.item(),
        }


class MIANet:
    def __init__(self, cfg: RunConfig, table: WordEmbeddingTable | None = None, seed: int | None = None):
        self.cfg = cfg
        self.table = table
        if cfg.gim and cfg.word_embeddings:
            if table is None:
                raise ValueError("word embeddings are enabled but no table was given")
            if table.dim != cfg.d:
                raise ValueError(f"embedding dimension {table.dim} != configured d={cfg.d}")
        self.hpm_cfg = HpmConfig(
            scales=tuple(cfg.active_scales),
            info_channels=cfg.info_channels,
            refilter_each_stage=cfg.refilter_each_stage,
        )
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 1])
        self.fusion = FusionBlock(cfg.c, self.hpm_cfg.scales, rng)
        self.gig = GigNetwork(cfg.d, cfg.c, rng, use_word=cfg.word_embeddings) if cfg.gim else None
        self.lfg = LfgNetwork(cfg.c, rng) if cfg.gim and cfg.triplet_loss else None

    @property
    def params(self) -> list[Parameter]:
        out = list(self.fusion.params)
        if self.gig is not None:
            out += self.gig.params
        if self.lfg is not None:
            out += self.lfg.params
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.params}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = {p.name: p for p in self.params}
        problems = [f"missing {n} {params[n].shape}" for n in sorted(set(params) - set(state))]
        problems += [f"unexpected {n} {np.shape(state[n])}" for n in sorted(set(state) - set(params))]
        problems += [
            f"{n}: checkpoint {np.shape(state[n])} vs model {p.shape}"
            for n, p in params.items()
            if n in state and np.shape(state[n]) != p.shape
        ]
        if problems:
            raise ValueError("checkpoint does not match model: " + "; ".join(problems))
        for n, p in params.items():
            p.value = np.array(state[n], dtype=np.float64)

    def save(self, path: str | Path) -> None:
        ad.save_checkpoint(path, self.params)

    def load(self, path: str | Path) -> None:
        self.load_state(ad.load_checkpoint(path))

    # ------------------------------------------------------------ support side

    def shot_pyramid(self, episode: Episode, k: int) -> PriorPyramid:
        shot = episode.support[k]
        if not self.cfg.hpm:
            return PriorPyramid([np.zeros(s) for s in self.hpm_cfg.scales])
        h, w = self.hpm_cfg.scales[0]
        f_s = resize_bilinear(shot.high, h, w)
        f_q = resize_bilinear(episode.query.high, h, w)
        return build_prior_pyramid(f_s, f_q, shot.mask, self.hpm_cfg)

    def support_info(self, episode: Episode) -> SupportInfo:
        """Non-learned support-side quantities; cached on the episode."""
        key = ("support", self.hpm_cfg, self.cfg.hpm)
        info = episode.cache.get(key)
        if info is not None:
            return info
        pyramids = [self.shot_pyramid(episode, k) for k in range(episode.shots)]
        protos, empties = [], []
        for shot in episode.support:
            p, empty = support_prototype(shot.mid, shot.mask)
            protos.append(p)
            empties.append(empty)
        rows = [np.zeros((0, self.cfg.c))] * episode.shots
        pyramid, proto, _ = kshot_aggregate(pyramids, protos, rows)
        info = SupportInfo(pyramid, proto, pyramids, protos, all(empties))
        episode.cache[key] = info
        return info

    def word_vector(self, class_name: str) -> np.ndarray | None:
        if not (self.cfg.gim and self.cfg.word_embeddings):
            return None
        return lookup_embedding(class_name, self.table)

    def region_rows(self, tape: Tape, episode: Episode) -> tuple[Var, np.ndarray, np.ndarray]:
        """Union of region features over shots, with foreground / background row indices."""
        per_shot, fg, bg = [], [], []
        offset = 0
        for shot in episode.support:
            rows = region_features(tape, shot.mid, self.lfg)
            grid = region_grid(*shot.mid.shape[1:])
            part = partition_regions(rows.value, shot.mask, grid)
            fg.append(part.fg_index + offset)
            bg.append(part.bg_index + offset)
            offset += rows.shape[0]
            per_shot.append(rows)
        union = per_shot[0] if len(per_shot) == 1 else ad.concat(tape, per_shot)
        return union, np.concatenate(fg), np.concatenate(bg)

    def triplet_term(self, tape: Tape, episode: Episode, p_gen: Var) -> tuple[Var, bool]:
        rows, fg, bg = self.region_rows(tape, episode)
        if len(fg) == 0 or len(bg) == 0:
            return Var(0.0), True
        negative = ad.mean_rows(tape, ad.take_rows(tape, rows, bg))
        pick = hardest_positive_index(p_gen.value, rows.value[fg], self.cfg.metric)
        positive = ad.reshape(tape, ad.take_rows(tape, rows, [fg[pick]]), (self.cfg.c,))
        if self.cfg.stop_gradient_mined:
            positive = ad.stop_gradient(tape, positive)
            negative = ad.stop_gradient(tape, negative)
        sample = TripletSample(p_gen, positive, negative, self.cfg.margin)
        return triplet_loss(tape, sample, self.cfg.metric), False

    # ---------------------------------------------------------------- forward

    def forward(self, episode: Episode, tape: Tape | None = None, with_loss: bool = True) -> ForwardResult:
        tape = tape if tape is not None else Tape(record=False)
        info = self.support_info(episode)
        if self.gig is not None:
            p_gen = general_prototype(tape, self.word_vector(episode.class_name), info.prototype, self.gig)
        else:
            p_gen = tape.var(info.prototype)
        triples = expand_inputs(tape, episode.query.mid, p_gen, info.pyramid)
        preds = fuse_and_predict(tape, triples, self.fusion, episode.image_size())
        result = ForwardResult(preds, p_gen, info)
        if not with_loss:
            return result
        seg1, seg2 = segmentation_losses(tape, preds, episode.query_mask(), self.cfg.seg1_weights)
        if self.lfg is not None:
            trip, skipped = self.triplet_term(tape, episode, p_gen)
        else:
            trip, skipped = Var(0.0), False
        result.seg1, result.seg2, result.triplet = seg1, seg2, trip
        result.triplet_skipped = skipped
        result.total = total_loss(tape, seg1, seg2, trip)
        return result

    def predict(self, episode: Episode) -> np.ndarray:
        """Binary query mask at image resolution; never reads the query mask."""
        return self.forward(episode, Tape(record=False), with_loss=False).preds.final_mask()
