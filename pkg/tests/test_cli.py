import subprocess
import sys

import numpy as np
import pytest

from avdepth import cli
from avdepth.formats import read_pnm
from avdepth.model import AVDepthModel
from avdepth.nets import NetConfig
from avdepth.nn import Module
from avdepth.scene import load_split
from avdepth.tensor import Tensor


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert run("gen-data", "--out", out, "--n-train", 4, "--n-val", 2, "--n-test", 2, "--seed", 1) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    assert run("train", "--data", dataset, "--out", ckpt, "--epochs", 1, "--batch", 2, "--k", 4) == 0
    return ckpt


class TestGenData:
    @pytest.mark.parametrize("profile, shape", [("replica", (2, 257, 166)), ("matterport", (2, 257, 121))])
    def test_profile_shapes(self, profile, shape, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--n-train", 1, "--n-val", 1, "--n-test", 1,
                   "--profile", profile) == 0
        assert load_split(tmp_path, "train").spectrograms.shape[1:] == shape

    def test_rerun_bitwise_identical(self, dataset, tmp_path):
        assert run("gen-data", "--out", tmp_path, "--n-train", 4, "--n-val", 2, "--n-test", 2, "--seed", 1) == 0
        for f in sorted(dataset.iterdir()):
            assert (tmp_path / f.name).read_bytes() == f.read_bytes()

    def test_io_failure_exit_2(self, tmp_path):
        blocker = tmp_path / "f"
        blocker.write_text("")
        assert run("gen-data", "--out", blocker / "x", "--n-train", 1, "--n-val", 1, "--n-test", 1) == 2


class TestConfigFile:
    def test_file_then_flag_override(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# dataset knobs\nn-train = 3\nn_val=2\nseed=7\nprofile=matterport\n")
        args = cli.parse_args(["gen-data", "--out", "x", "--config", str(cfg), "--seed", "9"])
        assert (args.n_train, args.n_val, args.seed, args.profile) == (3, 2, 9, "matterport")

    def test_required_flag_from_file(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"out={tmp_path / 'o'}\n")
        assert cli.parse_args(["gen-data", "--config", str(cfg)]).out == str(tmp_path / "o")

    def test_boolean_key(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("l2-decay=true\n")
        assert cli.parse_args(["train", "--data", "d", "--out", "o", "--config", str(cfg)]).l2_decay is True

    @pytest.mark.parametrize("body", ["bogus=1\n", "seed=abc\n", "profile=cd\n", "no equals sign\n"])
    def test_bad_file_rejected(self, body, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(body)
        with pytest.raises(SystemExit) as exc:
            cli.parse_args(["gen-data", "--out", "x", "--config", str(cfg)])
        assert exc.value.code == 2


class TestTrain:
    def test_artifacts(self, checkpoint):
        assert checkpoint.exists()
        log = checkpoint.with_name(checkpoint.name + ".csv").read_text()
        assert log.startswith("epoch,split,loss,rmse,rel,log10,d1,d2,d3,n_valid\n")
        manifest = checkpoint.with_name(checkpoint.name + ".manifest.txt").read_text()
        for key in ("lr=", "beta2=", "eps=", "weight_decay=", "model_seed=", "data.seed="):
            assert key in manifest

    def test_determinism(self, dataset, tmp_path):
        outs = []
        for i in range(2):
            ckpt = tmp_path / f"m{i}.ckpt"
            assert run("train", "--data", dataset, "--out", ckpt, "--epochs", 1, "--batch", 2, "--modalities",
                       "echo+img", "--seed", 3) == 0
            outs.append((ckpt.read_bytes(), (tmp_path / f"m{i}.ckpt.csv").read_bytes()))
        assert outs[0] == outs[1]

    def test_divergence_exit_3(self, dataset, tmp_path):
        code = run("train", "--data", dataset, "--out", tmp_path / "m.ckpt", "--epochs", 3, "--batch", 2,
                   "--modalities", "img", "--lr", "1e300")
        assert code == 3
        assert not (tmp_path / "m.ckpt").exists()

    def test_missing_data_exit_2(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "m.ckpt") == 2


class TestEval:
    def test_report_and_csv_stable(self, dataset, checkpoint, tmp_path, capsys):
        for name in ("a.csv", "b.csv"):
            assert run("eval", "--ckpt", checkpoint, "--data", dataset, "--split", "test", "--csv", tmp_path / name) == 0
        assert "rmse" in capsys.readouterr().out
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_resolution_sweep_six_rows(self, dataset, checkpoint, tmp_path):
        assert run("eval", "--ckpt", checkpoint, "--data", dataset, "--resolution-sweep", "--csv", tmp_path / "s.csv") == 0
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert [ln.split(",")[0] for ln in lines[1:]] == ["1", "1/2", "1/4", "1/8", "1/16", "1/32"]

    def test_perfect_oracle_model(self, dataset, tmp_path, monkeypatch):
        """A fixture model that looks the ground truth up by image content."""
        split = load_split(dataset, "test")
        table = {split.images[i].astype(np.float64).tobytes(): split.depths[i].astype(np.float64)
                 for i in range(len(split))}

        class Oracle(Module):
            def forward(self, spec, img):
                return {"depth": Tensor(np.stack([table[x.tobytes()] for x in img.data]))}

        monkeypatch.setattr(cli, "load_checkpoint", lambda path: (Oracle(), ""))
        assert run("eval", "--ckpt", "unused", "--data", dataset, "--csv", tmp_path / "o.csv") == 0
        row = (tmp_path / "o.csv").read_text().splitlines()[1].split(",")
        assert float(row[1]) == 0.0 and [float(v) for v in row[4:7]] == [1.0, 1.0, 1.0]

    def test_corrupt_checkpoint_exit_4(self, dataset, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"AVC1garbage")
        assert run("eval", "--ckpt", bad, "--data", dataset) == 4

    def test_wrong_magic_via_console_script(self, dataset, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE")
        proc = subprocess.run([sys.executable, "-m", "avdepth.cli", "eval", "--ckpt", str(bad), "--data", str(dataset)],
                              capture_output=True, text=True)
        assert proc.returncode == 4 and "bad artifact" in proc.stderr


class TestInspect:
    def test_exports(self, tmp_path):
        assert run("inspect", "--scene-seed", 5, "--out", tmp_path) == 0
        magic, maxval, depth = read_pnm(tmp_path / "depth.pgm")
        assert (magic, maxval) == ("P5", 65535)
        magic, maxval, rgb = read_pnm(tmp_path / "image.ppm")
        assert (magic, maxval, rgb.shape) == ("P6", 255, (32, 32, 3))
        assert "meters_per_level=0.001" in (tmp_path / "depth.txt").read_text()
        assert (tmp_path / "echo.wav").stat().st_size > 0
        assert read_pnm(tmp_path / "spectrogram_left.pgm")[2].shape == (257, 166)

    def test_depth_round_trip_within_one_level(self, tmp_path):
        from avdepth.scene import DatasetConfig, generate_scene

        run("inspect", "--scene-seed", 8, "--out", tmp_path)
        _, _, levels = read_pnm(tmp_path / "depth.pgm")
        truth = generate_scene(8, DatasetConfig()).depth
        assert np.max(np.abs(levels * cli.DEPTH_METERS_PER_LEVEL - truth)) <= cli.DEPTH_METERS_PER_LEVEL

    def test_attention_heatmap(self, checkpoint, tmp_path):
        assert run("inspect", "--scene-seed", 2, "--out", tmp_path, "--ckpt", checkpoint) == 0
        magic, maxval, att = read_pnm(tmp_path / "attention.pgm")
        assert (magic, maxval, att.shape) == ("P5", 255, (32, 32))
        assert att.min() >= 0 and att.max() <= 255

    def test_heatmap_scaling(self):
        h = cli.heatmap(np.array([0.0, 0.5, 1.0]), 0.0, 1.0)
        np.testing.assert_allclose(h, [0, 127.5, 255])

    def test_fused_checkpoint_kind(self, checkpoint):
        from avdepth.train import load_checkpoint

        model, text = load_checkpoint(checkpoint)
        assert isinstance(model, AVDepthModel) and model.K == 4 and isinstance(model.cfg, NetConfig)
        assert "fusion=bilinear" in text
