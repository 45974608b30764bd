"""Information fusion module: multi-scale merge of query features, prototype and priors.

A simplified FEM-style head.  Each scale concatenates ``[f_q^i, p_gen^i, m^i]``
(``2c + 1`` channels), runs two conv3x3 + ReLU layers, adds the upsampled
fused map of the next coarser scale, and emits 2-class logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Var
from .hpm import PriorPyramid


@dataclass
class ScaleInputs:
    query: Var
    prototype: Var
    prior: Var


@dataclass
class PredictionSet:
    Y_inter: list[Var]
    Y: Var

    def final_mask(self) -> np.ndarray:
        return np.argmax(self.Y.value, axis=0).astype(np.uint8)


class FusionBlock:
    def __init__(
        self,
        c: int,
        scales: Sequence[tuple[int, int]],
        rng: np.random.Generator,
        zero_heads: bool = False,
    ):
        self.c = c
        self.scales = [tuple(s) for s in scales]
        self.merge = []
        self.heads = []
        for i in range(len(self.scales)):
            self.merge.append(
                ad.conv_params(rng, f"ifm.s{i}.merge0", 2 * c + 1, c)
                + ad.conv_params(rng, f"ifm.s{i}.merge1", c, c)
            )
            head = ad.conv_params(rng, f"ifm.s{i}.head", c, 2)
            if zero_heads:
                for p in head:
                    p.value[...] = 0.0
            self.heads.append(head)

    @property
    def params(self) -> list[Parameter]:
        out: list[Parameter] = []
        for merge, head in zip(self.merge, self.heads):
            out += merge + head
        return out


def expand_inputs(tape: Tape, f_q: np.ndarray, p_gen, pyramid: PriorPyramid) -> list[ScaleInputs]:
    triples = []
    for m in pyramid.maps:
        h, w = m.shape
        triples.append(
            ScaleInputs(
                query=ad.resize(tape, f_q, h, w),
                prototype=ad.expand(tape, p_gen, h, w),
                prior=tape.var(m[None]),
            )
        )
    return triples


def fuse_and_predict(
    tape: Tape, triples: Sequence[ScaleInputs], block: FusionBlock, out_size: tuple[int, int]
) -> PredictionSet:
    n = len(triples)
    if n != len(block.scales):
        raise ValueError(f"{n} scales of input for a block built with {len(block.scales)}")
    heads: list[Var | None] = [None] * n
    coarser: Var | None = None
    for i in reversed(range(n)):
        t = triples[i]
        w0, b0, w1, b1 = block.merge[i]
        x = ad.concat(tape, [t.query, t.prototype, t.prior])
        x = ad.relu(tape, ad.conv3x3(tape, x, w0, b0))
        x = ad.relu(tape, ad.conv3x3(tape, x, w1, b1))
        if coarser is not None:
            x = ad.add(tape, x, ad.resize(tape, coarser, *x.shape[1:]))
        heads[i] = ad.conv3x3(tape, x, *block.heads[i])
        coarser = x
    Y = ad.resize(tape, heads[0], *out_size)
    return PredictionSet(Y_inter=heads, Y=Y)


def segmentation_losses(
    tape: Tape,
    preds: PredictionSet,
    mask_q: np.ndarray,
    weights: Sequence[float] | None = None,
) -> tuple[Var, Var]:
    """Cross-entropy on the upsampled intermediate heads and on the final logits.

    The intermediate term is a weighted mean over scales (equal weights by default).
    """
    H, W = mask_q.shape
    if preds.Y.shape[1:] != (H, W):
        raise ValueError(f"final logits {preds.Y.shape} do not match mask {mask_q.shape}")
    n = len(preds.Y_inter)
    weights = [1.0 / n] * n if weights is None else list(weights)
    if len(weights) != n:
        raise ValueError(f"{len(weights)} weights for {n} intermediate heads")
    terms = [
        ad.scale(tape, ad.cross_entropy_2class(tape, ad.resize(tape, y, H, W), mask_q), wt)
        for y, wt in zip(preds.Y_inter, weights)
    ]
    seg1 = ad.total(tape, terms)
    seg2 = ad.cross_entropy_2class(tape, preds.Y, mask_q)
    return seg1, seg2


def total_loss(tape: Tape, seg1, seg2, triplet) -> Var:
    return ad.total(tape, [seg1, seg2, triplet])
