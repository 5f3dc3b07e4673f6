"""Command-line subcommands and exit codes."""

import json
import subprocess
import sys

import pytest

from qpsnn.checkpoint import MANIFEST, MASTERS, WEIGHTS
from qpsnn.cli import main

from test_pipeline import small_config


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(small_config(data={"source": "synthetic", "n_classes": 3, "n_per_class": 20,
                                                  "test_per_class": 4, "image_size": 8},
                                           train={"epochs": 3, "batch_size": 8})))
    return path


@pytest.fixture
def trained(tmp_path, config):
    out = tmp_path / "trained"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    return out


class TestCommands:
    def test_inspect(self, trained, capsys):
        assert main(["inspect", str(trained)]) == 0
        text = capsys.readouterr().out
        assert "qpsnn-checkpoint v1" in text and "4-bit l1_mean" in text

    def test_prune_then_finetune(self, tmp_path, config, trained, capsys):
        pruned = tmp_path / "pruned"
        assert main(["prune", str(trained), "--config", str(config), "--out", str(pruned)]) == 0
        assert "layer 0: 2" in capsys.readouterr().out
        assert (pruned / "importance_report.txt").exists()
        tuned = tmp_path / "tuned"
        assert main(["finetune", str(pruned), "--config", str(config), "--out", str(tuned)]) == 0
        manifest = json.loads((tuned / MANIFEST).read_text())
        assert manifest["prune_masks"]["0"] == json.loads((pruned / MANIFEST).read_text())["prune_masks"]["0"]

    def test_run_deterministic_is_byte_identical(self, tmp_path, config, capsys):
        for name in ("a", "b"):
            assert main(["run", "--config", str(config), "--out", str(tmp_path / name), "--deterministic"]) == 0
        assert "of the full-precision baseline" in capsys.readouterr().out
        for f in (MANIFEST, WEIGHTS, MASTERS):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_overrides(self, tmp_path, config):
        out = tmp_path / "o"
        assert main(["train", "--config", str(config), "--out", str(out), "--bits", "2", "--seed", "3"]) == 0
        manifest = json.loads((out / MANIFEST).read_text())
        assert manifest["quantization"]["3"]["bits"] == 2 and manifest["metadata"]["seed"] == 3

    def test_analyze_both_criteria(self, tmp_path, config, trained, capsys):
        for criterion in ("svs", "sca"):
            out = tmp_path / criterion
            code = main(["analyze", str(trained), "--config", str(config), "--criterion", criterion,
                         "--out", str(out), "--batches", "2"])
            assert code == 0
            analysis = json.loads((out / "analysis.json").read_text())
            assert analysis["criterion"] == criterion
            assert all(-1 <= v <= 1 for v in analysis["avg_cos_similarity"].values())
            assert (out / "importance_report.json").exists()
        assert "AvgCosS" in capsys.readouterr().out

    def test_report(self, tmp_path, config, trained, capsys):
        assert main(["report", str(trained)]) == 0
        assert "MB=" in capsys.readouterr().out
        assert main(["report", str(trained), "--config", str(config), "--out", str(tmp_path / "r")]) == 0
        assert "# SOPs" in capsys.readouterr().out
        assert (tmp_path / "r" / "size_report.json").exists()


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, trained, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["inspect", str(trained), "--frobnicate"])
        assert exc.value.code == 1
        assert "usage:" in capsys.readouterr().err

    def test_missing_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2

    def test_invalid_config(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"quantization": {"bits": 5}}))
        assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 2

    def test_corrupt_checkpoint_is_parse_error(self, tmp_path):
        (tmp_path / MANIFEST).write_text("{")
        assert main(["inspect", str(tmp_path)]) == 2

    def test_runtime_failure(self, tmp_path, trained):
        # a checkpoint built for 8x8 images meets a 12x12 dataset
        path = tmp_path / "other.json"
        path.write_text(json.dumps(small_config(data={"source": "synthetic", "n_classes": 3, "n_per_class": 8,
                                                      "image_size": 12})))
        assert main(["report", str(trained), "--config", str(path)]) == 3

    def test_module_entry_point(self, trained):
        proc = subprocess.run([sys.executable, "-m", "qpsnn", "inspect", str(trained)],
                              capture_output=True, text=True)
        assert proc.returncode == 0 and "qpsnn-checkpoint" in proc.stdout
        proc = subprocess.run([sys.executable, "-m", "qpsnn", "nope"], capture_output=True, text=True)
        assert proc.returncode == 1
