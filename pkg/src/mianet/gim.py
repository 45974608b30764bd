"""General information module: word vectors, general prototype and triplet mining."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Var
from .io import load_word2vec_text
from .tensor import l2_distance, masked_average_pool, resize_mask

DEFAULT_MARGIN = 0.5

_TOKEN_SPLIT = re.compile(r"[\s\-]+")


def tokenize(class_name: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(class_name.strip().lower()) if t]


class WordEmbeddingTable:
    """Case-insensitive token -> vector map of a fixed dimension."""

    def __init__(self, dim: int, vectors: dict[str, np.ndarray] | None = None):
        self.dim = dim
        self._vectors: dict[str, np.ndarray] = {}
        for token, vec in (vectors or {}).items():
            self.add(token, vec)

    def add(self, token: str, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ValueError(f"vector for {token!r} has shape {vec.shape}, expected ({self.dim},)")
        # first spelling wins when several casings collapse to one key
        self._vectors.setdefault(token.lower(), vec)

    def __contains__(self, token: str) -> bool:
        return token.lower() in self._vectors

    def __getitem__(self, token: str) -> np.ndarray:
        return self._vectors[token.lower()]

    def __len__(self) -> int:
        return len(self._vectors)

    def tokens(self) -> list[str]:
        return list(self._vectors)

    @classmethod
    def from_word2vec(cls, path: str | Path, expected_dim: int | None = None) -> "WordEmbeddingTable":
        dim, vectors = load_word2vec_text(path)
        if expected_dim is not None and dim != expected_dim:
            raise ValueError(f"{path}: embedding dimension {dim}, expected {expected_dim}")
        return cls(dim, vectors)


def toy_embedding_table(class_names: Sequence[str], dim: int, seed: int = 0) -> WordEmbeddingTable:
    """Unit-norm pseudo-random vectors for every token of ``class_names``.

    Each token's vector depends only on the token text, ``dim`` and ``seed``.
    """
    table = WordEmbeddingTable(dim)
    for name in class_names:
        for token in tokenize(name):
            if token in table:
                continue
            digest = hashlib.sha256(f"{seed}:{token}".encode()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.standard_normal(dim)
            table.add(token, vec / np.linalg.norm(vec))
    return table


def lookup_embedding(class_name: str, table: WordEmbeddingTable) -> np.ndarray:
    """Mean of the token vectors of a (possibly multi-word) class name."""
    tokens = tokenize(class_name)
    if not tokens:
        raise KeyError("empty class name")
    for token in tokens:
        if token not in table:
            raise KeyError(f"token {token!r} not in embedding table")
    return np.mean([table[t] for t in tokens], axis=0)


def support_prototype(f_s: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, bool]:
    return masked_average_pool(f_s, mask)


class GigNetwork:
    """Two fully connected layers ``[d + c -> c] -> ReLU -> [c -> c]``.

    With ``use_word=False`` the word vector is dropped and the input is the
    support prototype alone (width ``c``).
    """

    def __init__(self, d: int, c: int, rng: np.random.Generator, use_word: bool = True):
        self.d = d
        self.c = c
        self.use_word = use_word
        self.in_width = d + c if use_word else c
        self.fc1 = ad.linear_params(rng, "gig.fc1", self.in_width, c)
        self.fc2 = ad.linear_params(rng, "gig.fc2", c, c)

    @property
    def params(self) -> list[Parameter]:
        return self.fc1 + self.fc2

    def forward(self, tape: Tape, x) -> Var:
        hidden = ad.relu(tape, ad.linear(tape, x, *self.fc1))
        return ad.linear(tape, hidden, *self.fc2)


def general_prototype(tape: Tape, w: np.ndarray | None, p, gig: GigNetwork) -> Var:
    """``gig(w ++ p)``; ``w`` is ignored when the network was built without words."""
    p = tape.var(p)
    if p.shape != (gig.c,):
        raise ValueError(f"prototype has shape {p.shape}, network expects ({gig.c},)")
    if not gig.use_word:
        return gig.forward(tape, p)
    if w is None or np.shape(w) != (gig.d,):
        raise ValueError(f"word vector must have shape ({gig.d},)")
    return gig.forward(tape, ad.concat(tape, [w, p]))


class LfgNetwork:
    """Three conv3x3 + ReLU blocks with strides (2, 2, 1): a 4x spatial reduction."""

    strides = (2, 2, 1)

    def __init__(self, c: int, rng: np.random.Generator):
        self.c = c
        self.blocks = [ad.conv_params(rng, f"lfg.conv{i}", c, c) for i in range(3)]

    @property
    def params(self) -> list[Parameter]:
        return [p for block in self.blocks for p in block]

    def forward(self, tape: Tape, f) -> Var:
        x = tape.var(f)
        for block, stride in zip(self.blocks, self.strides):
            x = ad.relu(tape, ad.conv3x3(tape, x, *block, stride=stride))
        return x


def region_grid(h: int, w: int) -> tuple[int, int]:
    return -(-h // 4), -(-w // 4)


def region_features(tape: Tape, f_s, lfg: LfgNetwork) -> Var:
    """LFG output flattened to ``[n_regions, c]`` rows (row-major spatial order)."""
    f_s = tape.var(f_s)
    _, h, w = f_s.shape
    if h < 4 or w < 4:
        raise ValueError(f"support features too small for region features: {f_s.shape}")
    return ad.to_rows(tape, lfg.forward(tape, f_s))


@dataclass
class RegionPartition:
    fg_index: np.ndarray
    bg_index: np.ndarray
    V_fg: np.ndarray
    V_bg: np.ndarray


def partition_regions(
    f_reg: np.ndarray, mask: np.ndarray, grid: tuple[int, int]
) -> RegionPartition:
    f_reg = np.asarray(f_reg)
    h, w = grid
    if f_reg.shape[0] != h * w:
        raise ValueError(f"{f_reg.shape[0]} rows do not match region grid {grid}")
    flat = resize_mask(mask, h, w).reshape(-1)
    fg = np.flatnonzero(flat == 1)
    bg = np.flatnonzero(flat == 0)
    return RegionPartition(fg, bg, f_reg[fg], f_reg[bg])


def negative_sample(V_bg: np.ndarray) -> np.ndarray | None:
    """Mean background vector, or None when there is no background region."""
    V_bg = np.asarray(V_bg)
    if len(V_bg) == 0:
        return None
    return V_bg.mean(axis=0)


def hardest_positive_index(
    p_gen: np.ndarray, V_fg: np.ndarray, metric: str = "euclidean"
) -> int | None:
    """Index of the foreground vector farthest from the anchor (lowest index on ties)."""
    V_fg = np.asarray(V_fg)
    if len(V_fg) == 0:
        return None
    if metric == "cosine":
        dots = V_fg @ p_gen
        norms = np.linalg.norm(V_fg, axis=1) * np.linalg.norm(p_gen) + 1e-8
        dist = 1.0 - dots / norms
    else:
        dist = np.sqrt(((V_fg - p_gen) ** 2).sum(axis=1))
    return int(np.argmax(dist))


def hardest_positive(p_gen: np.ndarray, V_fg: np.ndarray) -> np.ndarray | None:
    i = hardest_positive_index(p_gen, V_fg)
    return None if i is None else np.asarray(V_fg)[i]


@dataclass
class TripletSample:
    anchor: Var | np.ndarray
    positive: Var | np.ndarray
    negative: Var | np.ndarray
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be > 0")


def triplet_loss(tape: Tape, t: TripletSample, metric: str = "euclidean") -> Var:
    """``max(d(a, p) + margin - d(a, n), 0)``."""
    dist = ad.cosine_distance if metric == "cosine" else ad.l2
    anchor = tape.var(t.anchor)
    d_pos = dist(tape, anchor, t.positive)
    d_neg = dist(tape, anchor, t.negative)
    gap = ad.total(tape, [d_pos, ad.scale(tape, d_neg, -1.0), np.asarray(t.margin)])
    return ad.relu(tape, gap)


def triplet_value(a, p, n, margin: float = DEFAULT_MARGIN) -> float:
    """Plain-float triplet loss, for callers without a tape."""
    return max(l2_distance(a, p) + margin - l2_distance(a, n), 0.0)
