"""Hierarchical prior module.

Builds a pyramid of query activation maps from high-level support and query
features.  Nothing here is learned: the maps come from cosine similarity
between query pixels and mask-filtered support pixels, and the query is
carried from one scale to the next by prior-weighted average pooling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    average_pool_to,
    cosine_similarity_matrix,
    hadamard,
    minmax_normalize,
    resize_bilinear,
    resize_mask,
)

FULL_SCALES = ((60, 60), (30, 30), (15, 15), (8, 8))
DESK_SCALES = ((24, 24), (12, 12), (6, 6), (3, 3))


@dataclass(frozen=True)
class HpmConfig:
    scales: tuple[tuple[int, int], ...] = FULL_SCALES
    info_channels: bool = True
    refilter_each_stage: bool = False
    reduce: str = "mean"  # "max" is experimental

    def __post_init__(self):
        scales = tuple(tuple(int(v) for v in s) for s in self.scales)
        object.__setattr__(self, "scales", scales)
        if not scales:
            raise ValueError("at least one scale is required")
        for (h0, w0), (h1, w1) in zip(scales, scales[1:]):
            if not (h0 > h1 and w0 > w1):
                raise ValueError(f"scales must be strictly decreasing, got {scales}")
        if self.reduce not in ("mean", "max"):
            raise ValueError(f"unknown reduction {self.reduce!r}")


@dataclass
class PriorPyramid:
    maps: list[np.ndarray]
    empty_foreground: bool = False
    shapes: list[tuple[int, int]] = field(init=False)

    def __post_init__(self):
        self.shapes = [m.shape for m in self.maps]

    def __len__(self) -> int:
        return len(self.maps)


def filter_support(f_s_h: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, bool]:
    """Zero the background pixels of the support features.

    Returns the filtered features and whether the resized mask was empty.
    """
    _, h, w = f_s_h.shape
    m = resize_mask(mask, h, w)
    return hadamard(f_s_h, m), not m.any()


def query_activation(
    f_s_filtered: np.ndarray, f_q_h: np.ndarray, reduce: str = "mean"
) -> np.ndarray:
    """Min-max normalised mean cosine similarity of each query pixel to the support."""
    if f_s_filtered.shape != f_q_h.shape:
        raise ValueError(f"shape mismatch: {f_s_filtered.shape} vs {f_q_h.shape}")
    c, h, w = f_q_h.shape
    sim = cosine_similarity_matrix(f_q_h.reshape(c, h * w), f_s_filtered.reshape(c, h * w))
    act = sim.max(axis=1) if reduce == "max" else sim.mean(axis=1)
    return minmax_normalize(act).reshape(h, w)


def weighted_downsample(f_q_h: np.ndarray, m: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return average_pool_to(hadamard(f_q_h, m), *size)


def resize_support(f_s_h: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return resize_bilinear(f_s_h, *size)


def build_prior_pyramid(
    f_s_h: np.ndarray, f_q_h: np.ndarray, mask: np.ndarray, cfg: HpmConfig
) -> PriorPyramid:
    """Compute one activation map per configured scale.

    ``f_s_h`` and ``f_q_h`` must already be at ``cfg.scales[0]``.
    """
    if f_s_h.shape[1:] != tuple(cfg.scales[0]) or f_q_h.shape != f_s_h.shape:
        raise ValueError(
            f"features must be at scale {cfg.scales[0]}, got {f_s_h.shape} / {f_q_h.shape}"
        )
    support, empty = filter_support(f_s_h, mask)
    query = np.asarray(f_q_h, dtype=np.float64)
    maps = []
    for i, size in enumerate(cfg.scales):
        if i > 0 and cfg.refilter_each_stage:
            support, _ = filter_support(support, mask)
        m = query_activation(support, query, cfg.reduce)
        maps.append(m)
        if i + 1 < len(cfg.scales):
            nxt = cfg.scales[i + 1]
            weights = m if cfg.info_channels else np.ones_like(m)
            query = weighted_downsample(query, weights, nxt)
            support = resize_support(support, nxt)
    return PriorPyramid(maps, empty_foreground=empty)
