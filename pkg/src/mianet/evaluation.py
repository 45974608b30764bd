"""mIoU / FB-IoU and the seeded multi-run evaluation protocol."""

from __future__ import annotations

import io
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .episodes import Dataset, Episode, FoldSplit, ToyEncoder, sample_episode

CSV_HEADER = "seed,fold,class,iou,fb_iou"


def _counts(pred: np.ndarray, truth: np.ndarray) -> tuple[int, int, int, int]:
    """Foreground and background (intersection, union) pixel counts."""
    p = np.asarray(pred).astype(bool)
    t = np.asarray(truth).astype(bool)
    return (
        int(np.sum(p & t)), int(np.sum(p | t)),
        int(np.sum(~p & ~t)), int(np.sum(~p | ~t)),
    )


def miou(
    predictions: Sequence[np.ndarray],
    ground_truths: Sequence[np.ndarray],
    class_of_episode: Sequence[str],
    class_list: Sequence[str],
    mode: str = "accumulate",
) -> tuple[dict[str, float], float]:
    """Per-class foreground IoU and their mean over classes that have episodes.

    ``accumulate`` sums intersections and unions per class before dividing;
    ``per_episode`` averages per-episode IoU within each class instead.
    """
    inter = dict.fromkeys(class_list, 0)
    union = dict.fromkeys(class_list, 0)
    per_ep: dict[str, list[float]] = {c: [] for c in class_list}
    seen = dict.fromkeys(class_list, 0)
    for pred, truth, cls in zip(predictions, ground_truths, class_of_episode):
        i, u, _, _ = _counts(pred, truth)
        inter[cls] += i
        union[cls] += u
        seen[cls] += 1
        per_ep[cls].append(i / u if u else 1.0)
    scores: dict[str, float] = {}
    for cls in class_list:
        if not seen[cls]:
            warnings.warn(f"class {cls!r} has no episodes; excluded from mIoU", stacklevel=2)
            continue
        if mode == "per_episode":
            scores[cls] = float(np.mean(per_ep[cls]))
        else:
            scores[cls] = inter[cls] / union[cls] if union[cls] else 1.0
    mean = float(np.mean(list(scores.values()))) if scores else float("nan")
    return scores, mean


def fbiou(predictions: Sequence[np.ndarray], ground_truths: Sequence[np.ndarray]) -> float:
    """Mean of foreground and background IoU accumulated over all pairs.

    A term whose accumulated union is zero (e.g. no foreground anywhere) is
    left out of the mean.
    """
    fi = fu = bi = bu = 0
    for pred, truth in zip(predictions, ground_truths):
        a, b, c, d = _counts(pred, truth)
        fi, fu, bi, bu = fi + a, fu + b, bi + c, bu + d
    terms = [i / u for i, u in ((fi, fu), (bi, bu)) if u]
    return float(np.mean(terms)) if terms else float("nan")


@dataclass(frozen=True)
class EvalProtocol:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    pairs_per_seed: int = 1000
    shots: int = 1
    iou_mode: str = "accumulate"

    @property
    def n_seeds(self) -> int:
        return len(self.seeds)


class Predictor(Protocol):
    def predict(self, episode: Episode) -> np.ndarray: ...


@dataclass
class SeedResult:
    seed: int
    class_iou: dict[str, float]
    class_fbiou: dict[str, float]
    miou: float
    fbiou: float


@dataclass
class EvalReport:
    fold: int
    seeds: list[SeedResult] = field(default_factory=list)

    @property
    def mean_miou(self) -> float:
        return float(np.mean([s.miou for s in self.seeds]))

    @property
    def std_miou(self) -> float:
        return float(np.std([s.miou for s in self.seeds]))

    @property
    def mean_fbiou(self) -> float:
        return float(np.mean([s.fbiou for s in self.seeds]))

    @property
    def std_fbiou(self) -> float:
        return float(np.std([s.fbiou for s in self.seeds]))

    def csv_rows(self) -> list[str]:
        rows = []
        for s in self.seeds:
            for cls, iou in s.class_iou.items():
                rows.append(f"{s.seed},{self.fold},{cls},{iou:.6f},{s.class_fbiou[cls]:.6f}")
            rows.append(f"{s.seed},{self.fold},__mean__,{s.miou:.6f},{s.fbiou:.6f}")
        rows.append(f"mean,{self.fold},__mean__,{self.mean_miou:.6f},{self.mean_fbiou:.6f}")
        rows.append(f"std,{self.fold},__mean__,{self.std_miou:.6f},{self.std_fbiou:.6f}")
        return rows

    def to_csv(self) -> str:
        return "\n".join([CSV_HEADER] + self.csv_rows()) + "\n"

    def summary(self) -> str:
        return (
            f"fold {self.fold}: mIoU {self.mean_miou:.4f} +/- {self.std_miou:.4f}, "
            f"FB-IoU {self.mean_fbiou:.4f} +/- {self.std_fbiou:.4f} over {len(self.seeds)} seeds"
        )


def merge_reports_csv(reports: Sequence[EvalReport]) -> str:
    out = io.StringIO()
    out.write(CSV_HEADER + "\n")
    for r in reports:
        for row in r.csv_rows():
            out.write(row + "\n")
    if len(reports) > 1:
        m = float(np.mean([r.mean_miou for r in reports]))
        f = float(np.mean([r.mean_fbiou for r in reports]))
        out.write(f"mean,all,__mean__,{m:.6f},{f:.6f}\n")
    return out.getvalue()


def worker_count(default: int = 1) -> int:
    raw = os.environ.get("MIANET_THREADS")
    if not raw:
        return default
    return max(1, int(raw))


def evaluate(
    model: Predictor,
    dataset: Dataset,
    split: FoldSplit,
    protocol: EvalProtocol,
    encoder: ToyEncoder,
    threads: int | None = None,
) -> EvalReport:
    """Run the seeded protocol on the split's test classes.

    Episodes are drawn serially per seed (so the draw does not depend on
    scheduling); predictions may be spread over worker threads and are
    gathered back in draw order.
    """
    threads = worker_count() if threads is None else threads
    report = EvalReport(split.fold)
    for seed in protocol.seeds:
        rng = np.random.default_rng(seed)
        episodes = [
            sample_episode(dataset, split.test, protocol.shots, rng, encoder).withheld()
            for _ in range(protocol.pairs_per_seed)
        ]
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                preds = list(pool.map(model.predict, episodes))
        else:
            preds = [model.predict(e) for e in episodes]
        truths = [e.query.mask for e in episodes]
        names = [e.class_name for e in episodes]
        class_iou, mean = miou(preds, truths, names, split.test, protocol.iou_mode)
        class_fb = {}
        for cls in class_iou:
            idx = [i for i, n in enumerate(names) if n == cls]
            class_fb[cls] = fbiou([preds[i] for i in idx], [truths[i] for i in idx])
        report.seeds.append(SeedResult(seed, class_iou, class_fb, mean, fbiou(preds, truths)))
    return report
