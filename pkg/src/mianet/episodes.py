"""Episodes: synthetic data, a frozen toy encoder, fold splits and K-shot aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import io as mio
from .hpm import PriorPyramid

DEFAULT_CLASSES = (
    "mug", "fork", "kite", "potted plant",
    "bottle", "chair", "bird", "boat",
    "lamp", "clock", "shoe", "tennis racket",
)


# --------------------------------------------------------------------- shapes


def _disk(u, v):
    return u * u + v * v <= 1.0


def _square(u, v):
    return np.maximum(np.abs(u), np.abs(v)) <= 0.8


def _triangle(u, v):
    return (v >= -0.75) & (np.abs(u) <= 0.5 * (0.95 - v))


def _ring(u, v):
    r2 = u * u + v * v
    return (r2 <= 1.0) & (r2 >= 0.4)


def _cross(u, v):
    return ((np.abs(u) <= 0.3) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 1.0))


def _bar(u, v):
    return (np.abs(u) <= 1.0) & (np.abs(v) <= 0.35)


def _diamond(u, v):
    return np.abs(u) + np.abs(v) <= 1.0


def _lshape(u, v):
    return ((u >= -0.9) & (u <= -0.2) & (np.abs(v) <= 0.9)) | ((v >= 0.2) & (v <= 0.9) & (np.abs(u) <= 0.9))


def _tee(u, v):
    return ((np.abs(u) <= 0.25) & (v >= -0.9) & (v <= 0.9)) | ((np.abs(u) <= 0.95) & (v <= -0.45) & (v >= -0.9))


SHAPES: dict[str, Callable] = {
    "disk": _disk, "square": _square, "triangle": _triangle, "ring": _ring,
    "cross": _cross, "bar": _bar, "diamond": _diamond, "lshape": _lshape, "tee": _tee,
}

# two fine-grained variants per class, cycled over the class list
_VARIANT_PAIRS = (
    ("disk", "cross"), ("bar", "diamond"), ("triangle", "square"), ("ring", "tee"),
    ("square", "lshape"), ("diamond", "ring"), ("cross", "triangle"), ("lshape", "disk"),
    ("tee", "bar"), ("disk", "triangle"), ("square", "cross"), ("ring", "bar"),
)


def canonical_mask(shape: str, size: int = 64) -> np.ndarray:
    g = (np.arange(size) + 0.5) / size * 2.4 - 1.2
    v, u = np.meshgrid(g, g, indexing="ij")
    return SHAPES[shape](u, v).astype(np.uint8)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter / union) if union else 1.0


# -------------------------------------------------------------------- dataset


@dataclass(frozen=True)
class ClassSpec:
    name: str
    color: tuple[float, float, float]
    variants: tuple[str, ...]
    stripe_freq: float
    stripe_angle: float


@dataclass(frozen=True)
class SynthConfig:
    classes: tuple[str, ...] = DEFAULT_CLASSES
    samples_per_class: int = 8
    image_size: int = 96
    max_variant_iou: float = 0.8


@dataclass
class Sample:
    id: int
    class_name: str
    variant: str
    image: np.ndarray  # [3, H, W], float32-representable values in [0, 1]
    mask: np.ndarray  # [H, W] uint8


@dataclass
class Dataset:
    classes: list[str]
    samples: list[Sample]
    image_size: int
    specs: dict[str, ClassSpec] = field(default_factory=dict)

    def by_class(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.class_name == name]

    def __getitem__(self, sample_id: int) -> Sample:
        return self.samples[sample_id]


def class_specs(cfg: SynthConfig, seed: int) -> list[ClassSpec]:
    rng = np.random.default_rng([seed, 7])
    specs = []
    n = len(cfg.classes)
    for i, name in enumerate(cfg.classes):
        hue = i / n
        color = tuple(float(0.5 + 0.45 * np.cos(2 * np.pi * (hue + k / 3))) for k in range(3))
        variants = _VARIANT_PAIRS[i % len(_VARIANT_PAIRS)]
        specs.append(
            ClassSpec(
                name=name,
                color=color,
                variants=variants,
                stripe_freq=float(rng.uniform(0.3, 0.9)),
                stripe_angle=float(rng.uniform(0, np.pi)),
            )
        )
    return specs


def check_variants(spec: ClassSpec, max_iou: float) -> None:
    masks = [canonical_mask(v) for v in spec.variants]
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            iou = mask_iou(masks[i], masks[j])
            if iou >= max_iou:
                raise ValueError(
                    f"class {spec.name!r}: variants {spec.variants[i]}/{spec.variants[j]} "
                    f"have IoU {iou:.3f} >= {max_iou}"
                )


def render_sample(spec: ClassSpec, variant: str, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw one object with random scale, rotation, anisotropic stretch and position."""
    radius = rng.uniform(0.24, 0.32) * size
    theta = rng.uniform(0, 2 * np.pi)
    stretch = rng.uniform(0.75, 1.3)
    skew_axis = rng.uniform(0, np.pi)
    margin = radius * 1.15
    cy, cx = rng.uniform(margin, size - margin, size=2)

    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    dy, dx = (yy - cy) / radius, (xx - cx) / radius
    # perspective-like anisotropic stretch along a random axis, then rotation
    ca, sa = np.cos(skew_axis), np.sin(skew_axis)
    a = (ca * dx + sa * dy) / stretch
    b = -sa * dx + ca * dy
    dx, dy = ca * a - sa * b, sa * a + ca * b
    ct, st = np.cos(theta), np.sin(theta)
    u = ct * dx + st * dy
    v = -st * dx + ct * dy
    mask = SHAPES[variant](u, v).astype(np.uint8)

    base = rng.uniform(0.35, 0.6)
    tint = rng.uniform(-0.05, 0.05, size=3)
    image = base + tint[:, None, None] + 0.04 * rng.standard_normal((3, size, size))
    color = np.asarray(spec.color) + rng.uniform(-0.05, 0.05, size=3)
    stripes = 0.12 * np.sin(
        spec.stripe_freq * (xx * np.cos(spec.stripe_angle) + yy * np.sin(spec.stripe_angle))
    )
    obj = color[:, None, None] + stripes[None]
    image = np.where(mask[None] == 1, obj, image)
    image = np.clip(image, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return image, mask


def synth_dataset(cfg: SynthConfig, seed: int) -> Dataset:
    specs = class_specs(cfg, seed)
    for spec in specs:
        check_variants(spec, cfg.max_variant_iou)
    samples = []
    for ci, spec in enumerate(specs):
        rng = np.random.default_rng([seed, ci])
        for k in range(cfg.samples_per_class):
            variant = spec.variants[k % len(spec.variants)]
            image, mask = render_sample(spec, variant, cfg.image_size, rng)
            samples.append(Sample(len(samples), spec.name, variant, image, mask))
    return Dataset(list(cfg.classes), samples, cfg.image_size, {s.name: s for s in specs})


def _slug(name: str) -> str:
    return name.replace(" ", "_")


def save_dataset(ds: Dataset, out_dir: str | Path, n_folds: int = 4) -> Path:
    """Write images (MIAT), masks (PGM) and ``manifest.json``; return the manifest path."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in ds.samples:
        stem = f"{s.id:05d}_{_slug(s.class_name)}"
        mio.save_miat(out / "samples" / f"{stem}.miat", s.image)
        mio.save_mask_pgm(out / "samples" / f"{stem}.pgm", s.mask)
        entries.append(
            {"id": s.id, "class": s.class_name, "variant": s.variant,
             "image": f"samples/{stem}.miat", "mask": f"samples/{stem}.pgm"}
        )
    folds = {str(f): FoldSplit.make(ds.classes, f, n_folds).test for f in range(n_folds)}
    manifest = {"image_size": ds.image_size, "classes": ds.classes, "folds": folds, "samples": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_dataset(manifest_path: str | Path) -> Dataset:
    path = Path(manifest_path)
    manifest = json.loads(path.read_text())
    root = path.parent
    samples = []
    for i, e in enumerate(manifest["samples"]):
        if e["id"] != i:
            raise ValueError(f"{path}: sample ids must be 0..n-1 in order")
        samples.append(
            Sample(e["id"], e["class"], e.get("variant", ""),
                   mio.load_miat(root / e["image"]), mio.load_mask_pgm(root / e["mask"]))
        )
    return Dataset(list(manifest["classes"]), samples, int(manifest["image_size"]))


# ---------------------------------------------------------------------- folds


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train: list[str]
    test: list[str]

    @classmethod
    def make(cls, classes: Sequence[str], fold: int, n_folds: int = 4) -> "FoldSplit":
        if not 0 <= fold < n_folds:
            raise ValueError(f"fold must be in 0..{n_folds - 1}")
        if len(classes) % n_folds:
            raise ValueError(f"{len(classes)} classes cannot be split evenly into {n_folds} folds")
        k = len(classes) // n_folds
        test = list(classes[fold * k : (fold + 1) * k])
        train = [c for c in classes if c not in test]
        return cls(fold, train, test)


# -------------------------------------------------------------------- encoder


class ToyEncoder:
    """Frozen, seeded random conv stack standing in for a pretrained backbone.

    Four stride-(2, 2, 1, 1) conv3x3 + ReLU stages.  Mid-level features are the
    concatenation of stages 2 and 3 (``c`` channels); high-level features are
    stage 4 (``high_channels``).  Both sit at 1/4 of the image resolution.
    """

    def __init__(self, c: int = 256, high_channels: int = 512, seed: int = 1234):
        if c % 2:
            raise ValueError("mid channel count must be even")
        self.c = c
        self.high_channels = high_channels
        rng = np.random.default_rng([seed, 99])
        half = c // 2
        self.stages = [
            ad.conv_params(rng, "enc0", 3, half),
            ad.conv_params(rng, "enc1", half, half),
            ad.conv_params(rng, "enc2", half, half),
            ad.conv_params(rng, "enc3", half, high_channels),
        ]
        self._cache: dict[int, dict[str, np.ndarray]] = {}

    def __call__(self, image: np.ndarray) -> dict[str, np.ndarray]:
        tape = ad.Tape(record=False)
        x = (np.asarray(image, dtype=np.float64) - 0.5) / 0.2
        outs = []
        for params, stride in zip(self.stages, (2, 2, 1, 1)):
            x = ad.relu(tape, ad.conv3x3(tape, x, *params, stride=stride)).value
            outs.append(x)
        return {"mid": np.concatenate([outs[1], outs[2]], axis=0), "high": outs[3]}

    def features(self, sample: Sample) -> dict[str, np.ndarray]:
        feats = self._cache.get(sample.id)
        if feats is None:
            feats = self(sample.image)
            self._cache[sample.id] = feats
        return feats


# ------------------------------------------------------------------- episodes


@dataclass
class Shot:
    sample_id: int
    mid: np.ndarray
    high: np.ndarray
    mask: np.ndarray


@dataclass
class Episode:
    class_name: str
    support: list[Shot]
    query: Shot
    mask_available: bool = True
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.support:
            raise ValueError("an episode needs at least one support shot")
        shapes = {(s.mid.shape, s.high.shape) for s in self.support}
        if len(shapes) != 1:
            raise ValueError("support feature shapes differ between shots")

    @property
    def shots(self) -> int:
        return len(self.support)

    def image_size(self) -> tuple[int, int]:
        return self.query.mask.shape

    def query_mask(self) -> np.ndarray:
        if not self.mask_available:
            raise RuntimeError("query mask is withheld for this episode")
        return self.query.mask

    def withheld(self) -> "Episode":
        """Copy with the query mask marked unavailable to the model."""
        return Episode(self.class_name, self.support, self.query, mask_available=False, cache=self.cache)


def _shot(sample: Sample, encoder: ToyEncoder) -> Shot:
    feats = encoder.features(sample)
    return Shot(sample.id, feats["mid"], feats["high"], sample.mask)


def sample_episode(
    dataset: Dataset,
    classes: Sequence[str],
    shots: int,
    rng: np.random.Generator,
    encoder: ToyEncoder,
) -> Episode:
    """Draw a class from ``classes``, then ``shots`` support samples and a distinct query."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    name = classes[int(rng.integers(len(classes)))]
    pool = dataset.by_class(name)
    if len(pool) < shots + 1:
        raise ValueError(f"class {name!r} has {len(pool)} samples, need {shots + 1}")
    picks = rng.choice(len(pool), size=shots + 1, replace=False)
    query = pool[int(picks[0])]
    support = [pool[int(i)] for i in picks[1:]]
    return Episode(name, [_shot(s, encoder) for s in support], _shot(query, encoder))


def kshot_aggregate(
    pyramids: Sequence[PriorPyramid],
    prototypes: Sequence[np.ndarray],
    region_rows: Sequence[np.ndarray],
) -> tuple[PriorPyramid, np.ndarray, np.ndarray]:
    """Average priors per scale and prototypes over shots; stack region rows."""
    k = len(pyramids)
    if k < 1 or len(prototypes) != k or len(region_rows) != k:
        raise ValueError("need the same K >= 1 pyramids, prototypes and region sets")
    shapes = {tuple(p.shapes) for p in pyramids}
    if len(shapes) != 1:
        raise ValueError(f"pyramid shapes differ across shots: {shapes}")
    if len({np.shape(p) for p in prototypes}) != 1:
        raise ValueError("prototype shapes differ across shots")
    if len({np.shape(r)[1:] for r in region_rows}) != 1:
        raise ValueError("region feature widths differ across shots")
    if k == 1:
        return pyramids[0], prototypes[0], region_rows[0]
    maps = [sum(p.maps[j] for p in pyramids) / k for j in range(len(pyramids[0]))]
    empty = all(p.empty_foreground for p in pyramids)
    proto = sum(prototypes) / k
    return PriorPyramid(maps, empty_foreground=empty), proto, np.concatenate(region_rows, axis=0)
