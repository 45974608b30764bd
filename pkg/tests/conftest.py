import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mianet.config import RunConfig
from mianet.episodes import Episode, FoldSplit, Shot, SynthConfig, ToyEncoder, synth_dataset
from mianet.gim import toy_embedding_table

TOY_SCALES = [[12, 12], [6, 6]]


def toy_config(**overrides) -> RunConfig:
    """c = 8, d = 8, two scales: small enough for exhaustive gradient checks."""
    values = dict(c=8, d=8, high_channels=8, image_size=24, scales=TOY_SCALES)
    values.update(overrides)
    return RunConfig.for_profile("desk", **values)


def random_mask(rng, h, w, lo=0.3, hi=0.7):
    """Blob mask covering part of the image, guaranteed non-empty and non-full."""
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = rng.uniform(lo * h, hi * h), rng.uniform(lo * w, hi * w)
    r = rng.uniform(0.25, 0.35) * min(h, w)
    return (((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r).astype(np.uint8)


def toy_episode(rng, cfg: RunConfig, shots: int = 1, class_name: str = "potted plant") -> Episode:
    h, w = cfg.scales[0]
    H = W = cfg.image_size

    def shot(i):
        return Shot(i, rng.standard_normal((cfg.c, h, w)), rng.standard_normal((cfg.high_channels, h, w)),
                    random_mask(rng, H, W))

    return Episode(class_name, [shot(i) for i in range(shots)], shot(shots))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_cfg():
    return RunConfig.for_profile("desk")


@pytest.fixture(scope="session")
def desk_data(desk_cfg):
    ds = synth_dataset(SynthConfig(image_size=desk_cfg.image_size), seed=0)
    enc = ToyEncoder(desk_cfg.c, desk_cfg.high_channels, seed=0)
    table = toy_embedding_table(ds.classes, desk_cfg.d, seed=0)
    return ds, enc, table, FoldSplit.make(ds.classes, 0)


@pytest.fixture
def toy_table():
    return toy_embedding_table(["potted plant", "mug", "fork"], 8, seed=3)
