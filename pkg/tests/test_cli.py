"""Command-line behavior: exit codes, artifacts, config precedence."""

import json
import os
import subprocess
import sys

import pytest

from hilonet.cli import main
from hilonet.datakit import (load_checkpoint, save_checkpoint, save_image,
                             synth_cls_corpus, synth_corpus, write_corpus)
from hilonet.freqmim import PretrainModel
from hilonet.model import ModelConfig

MINI_FLAGS = ["--img-size", "16", "--patch-size", "2", "--embed-dim", "8",
              "--depths", "1,1", "--num-heads", "2,4", "--window-size", "2",
              "--mlp-ratio", "2"]

MINI_CFG = ModelConfig(img_size=16, patch_size=2, embed_dim=8, depths=(1, 1),
                       num_heads=(2, 4), window_size=2, mlp_ratio=2,
                       num_classes=3)


@pytest.fixture(scope="module")
def cls_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cls")
    write_corpus(synth_cls_corpus(3, 16, seed=0), str(root), fmt="raw")
    return str(root)


@pytest.fixture(scope="module")
def flat_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("flat")
    ds = synth_corpus(6, 16, seed=1)
    for rec in ds.records:
        rec.label = None
    ds.class_names = None
    write_corpus(ds, str(root), fmt="raw")
    return str(root)


class TestAnalyze:
    def test_baseline_totals_on_stdout(self, capsys):
        assert main(["analyze", "--baseline"]) == 0
        out = capsys.readouterr().out
        assert "28,288,354" in out
        assert "4,490,566,656" in out
        assert "28.288M params" in out

    def test_artifacts_and_determinism(self, tmp_path, capsys):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert main(["analyze", "--baseline", "--out", a]) == 0
        assert main(["analyze", "--baseline", "--out", b]) == 0
        for d in (a, b):
            assert sorted(os.listdir(d)) == ["report.json", "report.txt", "run.json"]
        assert (open(os.path.join(a, "report.json"), "rb").read()
                == open(os.path.join(b, "report.json"), "rb").read())
        payload = json.loads(open(os.path.join(a, "report.json")).read())
        assert payload["totals"]["params"] == 28_288_354

    def test_verify_passes(self, capsys):
        assert main(["analyze", "--verify", *MINI_FLAGS]) == 0
        assert "parameters match" in capsys.readouterr().out

    def test_img_size_flag_changes_flops(self, capsys):
        assert main(["analyze", "--baseline", "--img-size", "448"]) == 0
        out = capsys.readouterr().out
        assert "img_size 448" in out

    def test_hf_overhead_block_present(self, capsys):
        assert main(["analyze"]) == 0
        out = capsys.readouterr().out
        assert "conv-branch overhead: +30,912 params" in out

    def test_flag_overrides_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"model": {"embed_dim": 96, "img_size": 16,
                                             "patch_size": 2, "depths": [1, 1],
                                             "num_heads": [2, 4], "window_size": 2,
                                             "mlp_ratio": 2}}))
        out_dir = str(tmp_path / "out")
        assert main(["analyze", "--config", str(cfg), "--embed-dim", "8",
                     "--out", out_dir]) == 0
        run = json.loads(open(os.path.join(out_dir, "run.json")).read())
        assert run["model"]["embed_dim"] == 8
        assert run["model"]["window_size"] == 2


class TestExitCodes:
    def test_malformed_config_json(self, tmp_path, capsys):
        cfg = tmp_path / "broken.json"
        cfg.write_text("{not json")
        assert main(["analyze", "--config", str(cfg)]) == 2
        assert "not valid JSON" in capsys.readouterr().err

    def test_non_object_config(self, tmp_path, capsys):
        cfg = tmp_path / "list.json"
        cfg.write_text("[1, 2]")
        assert main(["analyze", "--config", str(cfg)]) == 2

    def test_unknown_model_field(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"model": {"bogus_knob": 3}}))
        assert main(["analyze", "--config", str(cfg)]) == 2
        assert "unknown model config fields" in capsys.readouterr().err

    def test_missing_data_dir(self, tmp_path, capsys):
        assert main(["pretrain", "--data", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "out"), *MINI_FLAGS]) == 3
        assert "not a directory" in capsys.readouterr().err

    def test_train_cls_needs_class_folders(self, flat_dir, tmp_path, capsys):
        assert main(["train-cls", "--data", flat_dir,
                     "--out", str(tmp_path / "out"), *MINI_FLAGS]) == 2
        assert "subdirectory per class" in capsys.readouterr().err

    def test_train_cls_class_count_mismatch(self, cls_dir, tmp_path, capsys):
        assert main(["train-cls", "--data", cls_dir, "--out", str(tmp_path / "out"),
                     "--num-classes", "5", *MINI_FLAGS]) == 2
        assert "3" in capsys.readouterr().err

    def test_incompatible_init_checkpoint(self, cls_dir, tmp_path, capsys):
        ckpt = str(tmp_path / "bad.ckpt")
        no_hf = ModelConfig(**{**MINI_CFG.__dict__, "hf_branch_enabled": False})
        save_checkpoint(ckpt, PretrainModel(no_hf, seed=0).state(), {"kind": "pretrain"})
        rc = main(["train-cls", "--data", cls_dir, "--out", str(tmp_path / "out"),
                   "--init", ckpt, "--epochs", "1", *MINI_FLAGS])
        assert rc == 3
        err = capsys.readouterr().err
        assert "missing from checkpoint" in err
        assert ".hf." in err

    def test_unknown_subcommand_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["defragment"])
        assert exc.value.code == 2


class TestGradcheckCommand:
    def test_op_suites_pass(self, capsys):
        assert main(["gradcheck", "--skip-e2e"]) == 0
        out = capsys.readouterr().out
        assert "all gradient checks passed" in out
        assert "FAIL" not in out
        assert out.count("float32") == out.count("float64")


class TestMaskDump:
    def test_artifacts(self, tmp_path, capsys):
        img = str(tmp_path / "input.png")
        save_image(synth_corpus(1, 16, seed=3).records[0].pixels, img)
        out = str(tmp_path / "dump")
        assert main(["mask-dump", "--image", img, "--out", out,
                     "--patch", "4", "--seed", "5"]) == 0
        names = sorted(os.listdir(out))
        assert names == ["corrupted.png", "patch_spectra.png", "pixel_mask.png",
                         "plan.json", "run.json", "spectrum_full.png"]
        plan = json.loads(open(os.path.join(out, "plan.json")).read())
        assert plan["grid"] == [4, 4]
        assert plan["selected_count"] == len(plan["patches"]) == 8
        assert plan["rng_seed"] == 5
        for p in plan["patches"]:
            assert p["band"] in ("low", "high")


class TestTrainingCommands:
    def test_pretrain_smoke(self, flat_dir, tmp_path, capsys):
        out = str(tmp_path / "pre")
        rc = main(["pretrain", "--data", flat_dir, "--out", out, *MINI_FLAGS,
                   "--mask-patch", "4", "--batch-size", "3", "--max-steps", "2"])
        assert rc == 0
        assert sorted(os.listdir(out)) == ["loss.csv", "pretrain.ckpt", "run.json"]
        weights, blob = load_checkpoint(os.path.join(out, "pretrain.ckpt"))
        assert blob["kind"] == "pretrain"
        assert blob["model"]["embed_dim"] == 8
        assert any(n.startswith("backbone.") for n in weights)
        assert any(n.startswith("recon.") for n in weights)
        lines = open(os.path.join(out, "loss.csv")).read().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 3
        assert "pretrained 2 steps" in capsys.readouterr().out

    def test_train_cls_smoke_and_init(self, cls_dir, tmp_path, capsys):
        pre_out = str(tmp_path / "pre")
        rc = main(["pretrain", "--data", cls_dir, "--out", pre_out, *MINI_FLAGS,
                   "--mask-patch", "4", "--batch-size", "3", "--max-steps", "1"])
        assert rc == 0
        cls_out = str(tmp_path / "cls")
        rc = main(["train-cls", "--data", cls_dir, "--out", cls_out,
                   "--init", os.path.join(pre_out, "pretrain.ckpt"),
                   "--epochs", "1", "--batch-size", "3", *MINI_FLAGS])
        assert rc == 0
        out = capsys.readouterr().out
        assert "initialized backbone from" in out
        assert sorted(os.listdir(cls_out)) == ["classifier.ckpt", "run.json",
                                               "train_log.csv"]
        _, blob = load_checkpoint(os.path.join(cls_out, "classifier.ckpt"))
        assert blob["kind"] == "classifier"
        assert blob["class_names"] == ["checker", "gradient", "stripes"]
        assert blob["model"]["num_classes"] == 3
        log = open(os.path.join(cls_out, "train_log.csv")).read().splitlines()
        assert log[0] == "epoch,loss,train_acc,val_acc"
        assert len(log) == 2

    def test_num_classes_adopted_from_folders(self, cls_dir, tmp_path):
        out = str(tmp_path / "cls")
        rc = main(["train-cls", "--data", cls_dir, "--out", out,
                   "--epochs", "1", "--batch-size", "3", *MINI_FLAGS])
        assert rc == 0
        run = json.loads(open(os.path.join(out, "run.json")).read())
        assert run["model"]["num_classes"] == 3


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hilonet", "analyze", "--baseline"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert "28,288,354" in proc.stdout
