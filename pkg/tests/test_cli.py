import json
import subprocess
import sys

import numpy as np
import pytest

from tint.cli import build_parser, main
from tint.dataio import load_manifest, read_tensor_file, write_tensor_file
from tint.model import ModelConfig, build, read_checkpoint, save_checkpoint
from tint.train import decode_pgm

TEST_MODEL = {"input_size": 32, "embed_dims": [8, 16, 16, 16], "depths": [1, 1, 1, 1],
              "num_heads": [2, 2, 2], "window_sizes": [4, 2, 1]}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    values = {}
    for line in out.splitlines():
        key, sep, value = line.partition("=")
        if sep:
            values.setdefault(key, []).append(value)
    return code, values, err


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n", "20", "--seed", "4"]) == 0
    (root / "cfg.json").write_text(json.dumps({"model": TEST_MODEL, "train": {"batch_size": 8}}))
    return root


@pytest.fixture
def constant_ckpt(cli_data, tmp_path):
    manifest = load_manifest(cli_data / "data")
    model = build(ModelConfig.test())
    model.head.w.data[...] = 0.0
    model.head.b.data[...] = 61.25
    path = tmp_path / "const.ckpt"
    save_checkpoint(model, path, {"data": {"modalities": manifest.modalities,
                                           "mean": manifest.mean, "std": manifest.std}})
    return path


class TestSynth:
    def test_split_sizes(self, capsys, tmp_path):
        code, v, _ = run(capsys, "synth", "--out", tmp_path / "d", "--n", 100, "--seed", 1)
        assert code == 0
        assert (v["train_size"], v["val_size"], v["test_size"]) == (["80"], ["10"], ["10"])
        assert v["seed"] == ["1"] and json.loads(v["config"][0])["n"] == 100

    def test_same_seed_same_manifest(self, capsys, tmp_path):
        for name in ("a", "b"):
            run(capsys, "synth", "--out", tmp_path / name, "--n", 10, "--seed", 7)
        assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()

    def test_two_channels(self, capsys, tmp_path):
        run(capsys, "synth", "--out", tmp_path / "d", "--n", 10, "--channels", "ir,pmw")
        m = load_manifest(tmp_path / "d")
        assert m.modalities == ["IR", "PMW"]
        assert m.read_frame(m.split("train")[0]).shape[0] == 2

    def test_bad_channel(self, capsys, tmp_path):
        code, _, err = run(capsys, "synth", "--out", tmp_path / "d", "--channels", "vis")
        assert code == 1 and "channels" in err


class TestTrain:
    def test_recipe_defaults_echoed(self, capsys, cli_data, tmp_path):
        code, v, _ = run(capsys, "train", "--data", cli_data / "data", "--out", tmp_path / "r",
                         "--config", cli_data / "cfg.json", "--max-steps", 1)
        assert code == 0
        cfg = json.loads(v["config"][0])["train"]
        # the config file only sets batch_size; everything else is the default recipe
        assert (cfg["epochs"], cfg["base_lr"], cfg["decay_epochs"]) == (100, 1e-5, [50, 75])
        assert TestTrain.parser_defaults()

    @staticmethod
    def parser_defaults():
        from tint.train import TrainConfig

        cfg = TrainConfig()
        return (cfg.epochs, cfg.batch_size, cfg.base_lr) == (100, 32, 1e-5)

    def test_flags_override_file(self, capsys, cli_data, tmp_path):
        code, v, _ = run(capsys, "train", "--data", cli_data / "data", "--out", tmp_path / "r",
                         "--config", cli_data / "cfg.json", "--epochs", 1, "--batch-size", 4, "--lr", 0.002,
                         "--seed", 3, "--no-augment")
        assert code == 0
        cfg = json.loads(v["config"][0])
        assert cfg["train"]["batch_size"] == 4 and cfg["train"]["base_lr"] == 0.002
        assert cfg["train"]["decay_epochs"] == [] and cfg["train"]["augment"] is False
        assert cfg["model"]["seed"] == 3 and v["seed"] == ["3"]
        log = (tmp_path / "r/train_log.tsv").read_text().splitlines()
        assert len(log) == 2 and log[1].split("\t")[1] == "4"  # 16 train frames / batch 4

    def test_lr_zero_unchanged(self, capsys, cli_data, tmp_path):
        code, _, _ = run(capsys, "train", "--data", cli_data / "data", "--out", tmp_path / "r",
                         "--config", cli_data / "cfg.json", "--epochs", 1, "--lr", 0)
        assert code == 0
        init, _, _ = read_checkpoint(tmp_path / "r/init.ckpt")
        last, _, _ = read_checkpoint(tmp_path / "r/last.ckpt")
        for (n, a), (_, b) in zip(init.named_parameters(), last.named_parameters()):
            assert a.data.tobytes() == b.data.tobytes(), n

    def test_missing_manifest(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--data", tmp_path / "nope", "--out", tmp_path / "r")
        assert code == 2 and "manifest" in err

    def test_bad_config_values(self, capsys, cli_data, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {"layers": 3}}))
        code, _, err = run(capsys, "train", "--data", cli_data / "data", "--out", tmp_path / "r", "--config", bad)
        assert code == 1 and "layers" in err
        code, _, _ = run(capsys, "train", "--data", cli_data / "data", "--out", tmp_path / "r", "--lr", -1)
        assert code == 1

    def test_channel_subset(self, capsys, tmp_path):
        run(capsys, "synth", "--out", tmp_path / "d", "--n", 10, "--channels", "ir,wv")
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"model": TEST_MODEL}))
        code, v, _ = run(capsys, "train", "--data", tmp_path / "d", "--out", tmp_path / "r", "--config", cfg,
                         "--epochs", 1, "--channels", "wv")
        assert code == 0 and json.loads(v["config"][0])["model"]["in_channels"] == 1


class TestEval:
    def test_constant_head_prints_label_std(self, capsys, cli_data, constant_ckpt):
        labels = np.array([e.intensity for e in load_manifest(cli_data / "data").split("val")])
        model, _, _ = read_checkpoint(constant_ckpt)
        code, v, _ = run(capsys, "eval", "--data", cli_data / "data", "--ckpt", constant_ckpt, "--split", "val")
        assert code == 0
        expect = np.sqrt(np.mean((labels - np.float32(61.25)) ** 2))
        assert float(v["rmse_knots"][0]) == pytest.approx(expect, rel=1e-6)
        # with the head set to the split mean the printed value is the split's label std
        model.head.b.data[...] = labels.mean()
        save_checkpoint(model, constant_ckpt)
        _, v, _ = run(capsys, "eval", "--data", cli_data / "data", "--ckpt", constant_ckpt, "--split", "val")
        assert float(v["rmse_knots"][0]) == pytest.approx(labels.std(), rel=1e-5)

    def test_bad_checkpoint(self, capsys, cli_data, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"TCKP\x01garbage")
        code, _, err = run(capsys, "eval", "--data", cli_data / "data", "--ckpt", tmp_path / "bad.ckpt")
        assert code == 2 and "corrupt" in err

    def test_residual_dump(self, capsys, cli_data, constant_ckpt, tmp_path):
        code, v, _ = run(capsys, "eval", "--data", cli_data / "data", "--ckpt", constant_ckpt,
                         "--residuals", tmp_path / "res.tsv")
        assert code == 0 and v["n"] == ["2"]
        assert len((tmp_path / "res.tsv").read_text().splitlines()) == 3


class TestPredict:
    def test_constant_head_one_line_per_frame(self, capsys, constant_ckpt, tmp_path, rng):
        write_tensor_file(tmp_path / "many.tnsr", rng.normal(size=(3, 1, 50, 50)).astype(np.float32))
        code, v, _ = run(capsys, "predict", "--ckpt", constant_ckpt, "--input", tmp_path / "many.tnsr")
        assert code == 0 and v["intensity_knots"] == ["61.25"] * 3

    def test_single_frame(self, capsys, constant_ckpt, cli_data):
        frame = cli_data / "data/frames/000000.tnsr"
        assert read_tensor_file(frame).ndim == 3
        code, v, _ = run(capsys, "predict", "--ckpt", constant_ckpt, "--input", frame)
        assert code == 0 and len(v["intensity_knots"]) == 1

    def test_wrong_channel_count(self, capsys, constant_ckpt, tmp_path):
        write_tensor_file(tmp_path / "x.tnsr", np.zeros((2, 40, 40), np.float32))
        code, _, err = run(capsys, "predict", "--ckpt", constant_ckpt, "--input", tmp_path / "x.tnsr")
        assert code == 2 and "channels" in err


class TestGradcheck:
    def test_threshold_flag_and_determinism(self, capsys):
        args = ("gradcheck", "--seed", 2, "--coords", 2)
        code, v1, _ = run(capsys, *args)
        assert code == 0 and v1["status"] == ["pass"]
        _, v2, _ = run(capsys, *args)
        assert v1 == v2
        code, v3, err = run(capsys, *args, "--threshold", 1e-30)
        assert code == 3 and v3["status"] == ["fail"] and "exceeds" in err
        names = {k for k in v1 if k.startswith("max_rel_error.")}
        assert {"max_rel_error.window_msa", "max_rel_error.full_model_mse", "max_rel_error.head"} <= names


class TestSaliency:
    def test_valid_p5_and_deterministic(self, capsys, cli_data, tmp_path):
        model = build(ModelConfig.test())
        save_checkpoint(model, tmp_path / "m.ckpt")
        frame = cli_data / "data/frames/000001.tnsr"
        for name in ("a.pgm", "b.pgm"):
            code, v, err = run(capsys, "saliency", "--ckpt", tmp_path / "m.ckpt", "--input", frame,
                               "--out", tmp_path / name)
            assert code == 0 and v["degenerate"] == ["0"] and err == ""
        raw = (tmp_path / "a.pgm").read_bytes()
        assert raw.startswith(b"P5") and decode_pgm(raw).shape == (32, 32)
        assert raw == (tmp_path / "b.pgm").read_bytes()

    def test_degenerate_flag_on_stderr(self, capsys, constant_ckpt, cli_data, tmp_path):
        code, v, err = run(capsys, "saliency", "--ckpt", constant_ckpt, "--input",
                           cli_data / "data/frames/000000.tnsr", "--out", tmp_path / "z.pgm")
        assert code == 0 and v["degenerate"] == ["1"] and "degenerate" in err
        assert b"degenerate=1" in (tmp_path / "z.pgm").read_bytes()
        assert not decode_pgm((tmp_path / "z.pgm").read_bytes()).any()

    def test_frame_out_of_range(self, capsys, constant_ckpt, cli_data, tmp_path):
        code, _, _ = run(capsys, "saliency", "--ckpt", constant_ckpt, "--input",
                         cli_data / "data/frames/000000.tnsr", "--out", tmp_path / "z.pgm", "--frame", 3)
        assert code == 1


class TestUsage:
    @pytest.mark.parametrize("cmd", ["synth", "train", "eval", "predict", "gradcheck", "saliency"])
    def test_help_documents_every_flag(self, cmd, capsys):
        assert main([cmd, "--help"]) == 0
        out = capsys.readouterr().out
        sub = build_parser()._subparsers._group_actions[0].choices[cmd]
        for action in sub._actions:
            for flag in action.option_strings:
                assert flag in out
            if action.help is None:
                raise AssertionError(f"{cmd} {action.option_strings} has no help text")

    def test_unknown_flag(self, capsys):
        assert main(["synth", "--out", "x", "--bogus", "1"]) == 1
        assert "unrecognized" in capsys.readouterr().err

    def test_missing_subcommand(self, capsys):
        assert main([]) == 1

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "tint", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "gradcheck" in proc.stdout
