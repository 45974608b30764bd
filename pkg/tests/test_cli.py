import json
import subprocess
import sys

import numpy as np
import pytest

from mianet import io as mio
from mianet.cli import main
from mianet.config import RunConfig

TINY = {"c": 8, "high_channels": 8, "d": 8, "image_size": 32, "scales": [[8, 8], [4, 4]], "samples_per_class": 4}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_synth_is_byte_identical(tmp_path, tiny_config):
    for name in ("a", "b"):
        assert run("synth", "--config", tiny_config, "--seed", 3, "--out", tmp_path / name) == 0
    # config.json echoes the differing --out path, everything else must match
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file() and p.name != "config.json")
    assert len(files) > 10
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(manifest["folds"]) == 4


def test_prior_files_and_rerun(tmp_path, tiny_config, capsys):
    for name in ("a", "b"):
        assert run("prior", "--config", tiny_config, "--episode-seed", 2, "--out", tmp_path / name) == 0
    text = capsys.readouterr().out
    assert "m_ins_1 shape=(8, 8)" in text and "m_ins_2 shape=(4, 4)" in text
    for i in (1, 2):
        for ext in ("pgm", "miat"):
            a = (tmp_path / "a" / f"m_ins_{i}.{ext}").read_bytes()
            assert a == (tmp_path / "b" / f"m_ins_{i}.{ext}").read_bytes()
    m = mio.load_miat(tmp_path / "a" / "m_ins_1.miat")
    assert m.min() >= 0 and m.max() <= 1


def test_prior_desk_profile_writes_four_maps(tmp_path, capsys):
    assert run("prior", "--out", tmp_path) == 0
    assert sorted(p.name for p in tmp_path.glob("*.pgm")) == [f"m_ins_{i}.pgm" for i in range(1, 5)]
    out = capsys.readouterr().out
    for size in (24, 12, 6, 3):
        assert f"shape=({size}, {size})" in out


def test_config_echo_and_precedence(tmp_path, tiny_config):
    assert run("synth", "--config", tiny_config, "--margin", 0.2, "--out", tmp_path) == 0
    echoed = RunConfig.load(tmp_path / "config.json")
    assert echoed.c == 8 and echoed.margin == 0.2 and echoed.profile == "desk"
    assert echoed.out == str(tmp_path)


@pytest.mark.filterwarnings("ignore:class .* has no episodes")
def test_train_then_eval(tmp_path, tiny_config, capsys):
    out = tmp_path / "run"
    assert run("train", "--config", tiny_config, "--steps", 2, "--batch-size", 2, "--out", out) == 0
    lines = (out / "losses.csv").read_text().splitlines()
    assert lines[0] == "step,L_seg1,L_seg2,L_triplet,total" and len(lines) == 3
    ckpt = out / "model.miac"
    assert ckpt.exists()
    ev = tmp_path / "ev"
    assert run("eval", "--config", tiny_config, "--checkpoint", ckpt, "--seed-list", "0,1",
               "--pairs", 4, "--out", ev) == 0
    report = (ev / "report.csv").read_text().splitlines()
    assert report[0] == "seed,fold,class,iou,fb_iou"
    mean = [r for r in report if r.startswith("mean,")][0].split(",")
    seed_means = [float(r.split(",")[3]) for r in report if r[0].isdigit() and ",__mean__," in r]
    assert len(seed_means) == 2
    assert float(mean[3]) == pytest.approx(np.mean(seed_means), abs=2e-6)
    assert f"mIoU {float(mean[3]):.4f}" in capsys.readouterr().out


def test_zero_steps_checkpoint_equals_init(tmp_path, tiny_config):
    from mianet.autodiff import load_checkpoint
    from mianet.gim import toy_embedding_table
    from mianet.model import MIANet
    from mianet.episodes import DEFAULT_CLASSES

    assert run("train", "--config", tiny_config, "--steps", 0, "--out", tmp_path) == 0
    saved = load_checkpoint(tmp_path / "model.miac")
    cfg = RunConfig.load(tmp_path / "config.json")
    fresh = MIANet(cfg, toy_embedding_table(list(DEFAULT_CLASSES), cfg.d, cfg.seed))
    assert set(saved) == set(fresh.state())
    for name, value in fresh.state().items():
        assert saved[name].tobytes() == value.tobytes()


def test_no_gim_wiring(tmp_path, tiny_config):
    assert run("train", "--config", tiny_config, "--no-gim", "--steps", 1, "--batch-size", 1, "--out", tmp_path) == 0
    from mianet.autodiff import load_checkpoint
    names = load_checkpoint(tmp_path / "model.miac")
    assert all(n.startswith("ifm.") for n in names)
    assert RunConfig.load(tmp_path / "config.json").gim is False


@pytest.mark.filterwarnings("ignore:class .* has no episodes")
def test_five_shot_eval_routes_through_aggregation(tmp_path, tiny_config, monkeypatch):
    import mianet.model

    seen = []
    real = mianet.model.kshot_aggregate

    def spy(pyramids, prototypes, rows):
        seen.append(len(pyramids))
        return real(pyramids, prototypes, rows)

    monkeypatch.setattr(mianet.model, "kshot_aggregate", spy)
    assert run("train", "--config", tiny_config, "--steps", 0, "--out", tmp_path / "t") == 0
    cfg = dict(TINY, samples_per_class=6)
    path = tmp_path / "six.json"
    path.write_text(json.dumps(cfg))
    assert run("eval", "--config", path, "--shots", 5, "--checkpoint", tmp_path / "t" / "model.miac",
               "--seed-list", "0", "--pairs", 2, "--out", tmp_path / "e") == 0
    assert RunConfig.load(tmp_path / "e" / "config.json").shots == 5
    assert seen and set(seen) == {5}


class TestConvert:
    def test_miat_round_trip(self, tmp_path, rng):
        src = tmp_path / "a.miat"
        mio.save_miat(src, rng.standard_normal((2, 3, 4)))
        assert run("convert", src, tmp_path / "b.miat") == 0
        assert src.read_bytes() == (tmp_path / "b.miat").read_bytes()

    def test_mask_pgm_round_trip(self, tmp_path, rng):
        mask = (rng.random((9, 11)) > 0.5).astype(np.uint8)
        mio.save_mask_pgm(tmp_path / "m.pgm", mask)
        assert run("convert", tmp_path / "m.pgm", tmp_path / "m.miat") == 0
        assert run("convert", tmp_path / "m.miat", tmp_path / "back.pgm") == 0
        assert np.array_equal(mio.load_mask_pgm(tmp_path / "back.pgm"), mask)

    def test_csv(self, tmp_path):
        mio.save_miat(tmp_path / "t.miat", np.array([[1.5, 2.0], [3.0, -4.25]]))
        assert run("convert", tmp_path / "t.miat", tmp_path / "t.csv") == 0
        assert (tmp_path / "t.csv").read_text().splitlines() == ["1.5,2", "3,-4.25"]
        assert run("convert", tmp_path / "t.csv", tmp_path / "u.miat") == 0
        assert (tmp_path / "u.miat").read_bytes() == (tmp_path / "t.miat").read_bytes()

    def test_bad_shape(self, tmp_path, capsys):
        mio.save_miat(tmp_path / "t.miat", np.ones((2, 3, 3)))
        assert run("convert", tmp_path / "t.miat", tmp_path / "t.pgm") == 1
        assert "bad-shape" in capsys.readouterr().err


class TestErrors:
    def one_line_error(self, capsys, kind):
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith(f"mianet: error: {kind}:")

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert run("eval", "--checkpoint", tmp_path / "nope.miac", "--out", tmp_path) == 1
        self.one_line_error(capsys, "missing-file")

    def test_missing_manifest(self, tmp_path, capsys):
        assert run("prior", "--data", tmp_path / "none.json", "--out", tmp_path) == 1
        self.one_line_error(capsys, "missing-file")

    def test_missing_convert_input(self, tmp_path, capsys):
        assert run("convert", tmp_path / "x.miat", tmp_path / "y.miat") == 1
        self.one_line_error(capsys, "missing-file")

    def test_checkpoint_mismatch(self, tmp_path, tiny_config, capsys):
        assert run("train", "--config", tiny_config, "--steps", 0, "--out", tmp_path / "t") == 0
        capsys.readouterr()
        assert run("eval", "--checkpoint", tmp_path / "t" / "model.miac", "--out", tmp_path / "e") == 1
        err = capsys.readouterr().err
        assert "checkpoint-mismatch" in err and "(32, 65, 3, 3)" in err

    def test_bad_config_value(self, tmp_path, capsys):
        assert run("synth", "--margin", -1, "--out", tmp_path) == 1
        self.one_line_error(capsys, "bad-config")

    def test_embedding_dimension(self, tmp_path, capsys):
        emb = tmp_path / "w.txt"
        emb.write_text("1 3\nmug 1 2 3\n")
        assert run("train", "--steps", 0, "--embeddings", emb, "--out", tmp_path) == 1
        assert "expected 16" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_dump(self, tmp_path, tiny_config, capsys):
        assert run("train", "--config", tiny_config, "--lr", 1e300, "--steps", 20, "--batch-size", 1,
                   "--out", tmp_path) == 1
        self.one_line_error(capsys, "nan-loss")
        dump = json.loads((tmp_path / "nan_dump.json").read_text())
        assert dump["step"] >= 1 and "class" in dump


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mianet", "convert", str(tmp_path / "x.pgm"), str(tmp_path / "y.pgm")],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert proc.stderr.startswith("mianet: error: missing-file:")
