"""Command-line entry point: ``mianet {prior,train,eval,synth,convert}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as mio
from .autodiff import SgdConfig
from .config import RunConfig
from .episodes import Dataset, FoldSplit, SynthConfig, ToyEncoder, load_dataset, sample_episode, save_dataset, synth_dataset
from .evaluation import EvalProtocol, evaluate, merge_reports_csv
from .gim import WordEmbeddingTable, toy_embedding_table
from .model import MIANet
from .training import LOSS_COLUMNS, NonFiniteLoss, episode_stream, train

log = logging.getLogger("mianet")


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


# ----------------------------------------------------------------- arguments


def _seed_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--profile", choices=["desk", "paper"])
    p.add_argument("--fold", type=int)
    p.add_argument("--shots", type=int)
    p.add_argument("--seed", type=int, help="data / initialisation seed")
    p.add_argument("--seed-list", dest="seeds", type=_seed_list)
    p.add_argument("--margin", type=float)
    p.add_argument("--metric", choices=["euclidean", "cosine"])
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--steps", type=int, help="optimiser steps (overrides epochs)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--episode-pool", type=int, help="train on a fixed pool of N episodes")
    p.add_argument("--pairs", dest="pairs_per_seed", type=int)
    p.add_argument("--no-hpm", dest="hpm", action="store_const", const=False)
    p.add_argument("--no-gim", dest="gim", action="store_const", const=False)
    p.add_argument("--one-scale", dest="one_scale", action="store_const", const=True)
    p.add_argument("--no-info-channels", dest="info_channels", action="store_const", const=False)
    p.add_argument("--no-triplet", dest="triplet_loss", action="store_const", const=False)
    p.add_argument("--no-word-embeddings", dest="word_embeddings", action="store_const", const=False)
    p.add_argument("--stop-gradient-mined", dest="stop_gradient_mined", action="store_const", const=True)
    p.add_argument("--embeddings", help="word2vec text file")
    p.add_argument("--data", help="dataset manifest.json")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="output directory")


_CONFIG_FLAGS = (
    "profile", "fold", "shots", "seed", "seeds", "margin", "metric", "learning_rate",
    "batch_size", "steps", "epochs", "episode_pool", "pairs_per_seed", "hpm", "gim",
    "one_scale", "info_channels", "triplet_loss", "word_embeddings", "stop_gradient_mined",
    "embeddings", "data", "checkpoint", "out",
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mianet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prior", help="dump the prior pyramid of one episode")
    _add_common(p)
    p.add_argument("--episode-seed", type=int, default=0)

    p = sub.add_parser("train", help="episodic training")
    _add_common(p)

    p = sub.add_parser("eval", help="seeded evaluation protocol")
    _add_common(p)
    p.add_argument("--all-folds", action="store_true")

    p = sub.add_parser("synth", help="write a synthetic dataset and toy embeddings")
    _add_common(p)

    p = sub.add_parser("convert", help="convert between MIAT, PGM and CSV")
    p.add_argument("src")
    p.add_argument("dst")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError("missing-file", f"config file not found: {path}")
        file_values = json.loads(path.read_text())
    flags = {k: getattr(args, k) for k in _CONFIG_FLAGS if getattr(args, k, None) is not None}
    profile = flags.pop("profile", None) or file_values.get("profile", "desk")
    values = {k: v for k, v in file_values.items() if k != "profile"}
    values.update(flags)
    try:
        return RunConfig.for_profile(profile, **values)
    except (TypeError, ValueError) as exc:
        raise CliError("bad-config", str(exc))


# ------------------------------------------------------------------- context


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    return out


def load_data(cfg: RunConfig) -> Dataset:
    if cfg.data:
        if not Path(cfg.data).exists():
            raise CliError("missing-file", f"dataset manifest not found: {cfg.data}")
        return load_dataset(cfg.data)
    return synth_dataset(SynthConfig(samples_per_class=cfg.samples_per_class, image_size=cfg.image_size), cfg.seed)


def load_table(cfg: RunConfig, ds: Dataset) -> WordEmbeddingTable:
    if cfg.embeddings:
        if not Path(cfg.embeddings).exists():
            raise CliError("missing-file", f"embedding file not found: {cfg.embeddings}")
        return WordEmbeddingTable.from_word2vec(cfg.embeddings, expected_dim=cfg.d)
    return toy_embedding_table(ds.classes, cfg.d, cfg.seed)


def encoder_for(cfg: RunConfig) -> ToyEncoder:
    return ToyEncoder(cfg.c, cfg.high_channels, seed=cfg.seed)


# ------------------------------------------------------------------ commands


def cmd_prior(cfg: RunConfig, episode_seed: int) -> list[Path]:
    out = _out_dir(cfg)
    ds = load_data(cfg)
    split = FoldSplit.make(ds.classes, cfg.fold, cfg.n_folds)
    rng = np.random.default_rng(episode_seed)
    episode = sample_episode(ds, split.test, cfg.shots, rng, encoder_for(cfg))
    model = MIANet(cfg, table=None) if not cfg.gim else MIANet(cfg, load_table(cfg, ds))
    pyramid = model.support_info(episode).pyramid
    written = []
    print(f"episode class={episode.class_name} support={[s.sample_id for s in episode.support]} "
          f"query={episode.query.sample_id}")
    for i, m in enumerate(pyramid.maps, start=1):
        stem = out / f"m_ins_{i}"
        mio.save_unit_map_pgm(stem.with_suffix(".pgm"), m)
        mio.save_miat(stem.with_suffix(".miat"), m)
        written += [stem.with_suffix(".pgm"), stem.with_suffix(".miat")]
        print(f"m_ins_{i} shape={m.shape} min={m.min():.6f} max={m.max():.6f}")
    return written


def cmd_train(cfg: RunConfig) -> Path:
    out = _out_dir(cfg)
    ds = load_data(cfg)
    split = FoldSplit.make(ds.classes, cfg.fold, cfg.n_folds)
    model = MIANet(cfg, load_table(cfg, ds))
    stream = episode_stream(ds, split, cfg.shots, encoder_for(cfg), cfg.seed, cfg.episode_pool)
    sgd = SgdConfig(cfg.learning_rate, cfg.batch_size, cfg.momentum, cfg.weight_decay)
    log_path = out / "losses.csv"
    with open(log_path, "w") as fh:
        fh.write(",".join(LOSS_COLUMNS) + "\n")

        def write_row(row):
            fh.write(",".join([str(row["step"])] + [repr(row[k]) for k in LOSS_COLUMNS[1:]]) + "\n")

        try:
            result = train(model, stream, sgd, cfg.total_steps(), on_step=write_row)
        except NonFiniteLoss as exc:
            dump = out / "nan_dump.json"
            dump.write_text(json.dumps({
                "step": exc.step, "losses": {k: repr(v) for k, v in exc.losses.items()},
                "class": exc.episode.class_name,
                "support": [s.sample_id for s in exc.episode.support],
                "query": exc.episode.query.sample_id,
            }, indent=2))
            raise CliError("nan-loss", f"{exc} (diagnostics in {dump})")
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.miac"
    model.save(ckpt)
    if result.rows:
        print(f"trained {len(result.rows)} steps: total loss {result.rows[0]['total']:.4f} -> "
              f"{result.rows[-1]['total']:.4f} (triplet skipped {result.triplet_skips}x)")
    print(f"checkpoint: {ckpt}")
    return ckpt


def cmd_eval(cfg: RunConfig, all_folds: bool = False) -> Path:
    if not cfg.checkpoint:
        raise CliError("missing-file", "eval needs --checkpoint")
    if not Path(cfg.checkpoint).exists():
        raise CliError("missing-file", f"checkpoint not found: {cfg.checkpoint}")
    out = _out_dir(cfg)
    ds = load_data(cfg)
    model = MIANet(cfg, load_table(cfg, ds))
    try:
        model.load(cfg.checkpoint)
    except ValueError as exc:
        raise CliError("checkpoint-mismatch", str(exc))
    protocol = EvalProtocol(tuple(cfg.seeds), cfg.pairs_per_seed, cfg.shots, cfg.iou_mode)
    encoder = encoder_for(cfg)
    folds = range(cfg.n_folds) if all_folds else [cfg.fold]
    reports = []
    for fold in folds:
        split = FoldSplit.make(ds.classes, fold, cfg.n_folds)
        report = evaluate(model, ds, split, protocol, encoder)
        reports.append(report)
        print(report.summary())
    path = out / "report.csv"
    path.write_text(merge_reports_csv(reports))
    print(f"report: {path}")
    return path


def cmd_synth(cfg: RunConfig) -> Path:
    out = _out_dir(cfg)
    ds = synth_dataset(SynthConfig(samples_per_class=cfg.samples_per_class, image_size=cfg.image_size), cfg.seed)
    manifest = save_dataset(ds, out, cfg.n_folds)
    table = toy_embedding_table(ds.classes, cfg.d, cfg.seed)
    mio.save_word2vec_text(out / "embeddings.txt", {t: table[t] for t in table.tokens()})
    print(f"wrote {len(ds.samples)} samples of {len(ds.classes)} classes: {manifest}")
    return manifest


def _read_any(path: Path) -> np.ndarray:
    suffix = path.suffix.lower()
    if suffix == ".miat":
        return mio.load_miat(path)
    if suffix == ".pgm":
        return mio.load_pgm(path).astype(np.float64) / 255.0
    if suffix == ".csv":
        return np.loadtxt(path, delimiter=",", ndmin=2)
    raise CliError("bad-format", f"unsupported input format: {path}")


def cmd_convert(src: str | Path, dst: str | Path) -> None:
    src, dst = Path(src), Path(dst)
    if not src.exists():
        raise CliError("missing-file", f"input not found: {src}")
    suffix = dst.suffix.lower()
    if src.suffix.lower() == ".miat" and suffix == ".miat":
        dst.write_bytes(mio.miat_bytes(mio.load_miat(src)))
        return
    t = _read_any(src)
    if suffix == ".miat":
        mio.save_miat(dst, t)
        return
    plane = t.reshape(t.shape[-2:]) if t.ndim > 2 and int(np.prod(t.shape[:-2])) == 1 else t
    if suffix == ".pgm":
        if plane.ndim != 2:
            raise CliError("bad-shape", f"PGM needs a single 2-D plane, got shape {t.shape}")
        mio.save_unit_map_pgm(dst, plane)
    elif suffix == ".csv":
        if plane.ndim > 2:
            raise CliError("bad-shape", f"CSV needs a 1-D or 2-D tensor, got shape {t.shape}")
        np.savetxt(dst, np.atleast_2d(plane), delimiter=",", fmt="%.9g")
    else:
        raise CliError("bad-format", f"unsupported output format: {dst}")


# ---------------------------------------------------------------------- main


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "convert":
            cmd_convert(args.src, args.dst)
            return 0
        cfg = resolve_config(args)
        if args.command == "prior":
            cmd_prior(cfg, args.episode_seed)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.all_folds)
        elif args.command == "synth":
            cmd_synth(cfg)
    except CliError as exc:
        print(f"mianet: error: {exc.kind}: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"mianet: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
