import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from eofusion.cli import main
from eofusion.config import load_config
from eofusion.errors import ConfigError


def write_config(tmp_path: Path, **extra) -> Path:
    cfg = {
        "seed": 2,
        "data_root": str(tmp_path / "run"),
        "synth": {"n_scenes": 6, "height": 16, "width": 16,
                  "s2_frames": 26, "s1_frames": 45},
        "train_s1": {"max_epochs": 2, "batch_size": 4},
        "train_s2": {"max_epochs": 2, "batch_size": 4},
        "train_fusion": {"max_epochs": 2, "batch_size": 4},
        "gpp": {"epochs": 2, "sites": 2},
        "embed": {"frames": [0, 5]},
    }
    cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"sede": 1}))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_nested_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"synth": {"n_scene": 4}}))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_dotted_overrides(self):
        cfg = load_config(None, ["train_s2.max_epochs=7", "synth.noise=0.5",
                                 "data_root=elsewhere"])
        assert cfg.train_s2.max_epochs == 7
        assert cfg.synth.noise == 0.5
        assert cfg.data_root == "elsewhere"

    def test_invalid_value_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["train_s2.batch_size=0"])

    def test_config_hash_stable(self):
        a = load_config(None, ["seed=5"])
        b = load_config(None, ["seed=5"])
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != load_config(None, ["seed=6"]).config_hash()


class TestExitCodes:
    def test_pretrain_without_config_exits_2(self):
        proc = subprocess.run(
            [sys.executable, "-m", "eofusion.cli", "pretrain", "--modality", "s2"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 2
        assert "config" in proc.stderr.lower()

    def test_missing_config_file_exits_2(self, tmp_path):
        assert main(["pretrain", "--modality", "s2",
                     "--config", str(tmp_path / "nope.json")]) == 2

    def test_unknown_config_key_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"bogus": True}))
        assert main(["synth", "--config", str(bad)]) == 2

    def test_missing_cubes_exits_3(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["pretrain", "--modality", "s2", "--config", str(cfg)]) == 3


class TestSynthDeterminism:
    def test_double_run_byte_identical_cubes(self, tmp_path):
        for out in ("a", "b"):
            assert main(["synth", "--seed", "7", "--out", str(tmp_path / out),
                         "--set", "synth.n_scenes=2", "--set", "synth.height=16",
                         "--set", "synth.width=16", "--set", "synth.s2_frames=15",
                         "--set", "synth.s1_frames=25"]) == 0
        a = tree_bytes(tmp_path / "a" / "cubes")
        b = tree_bytes(tmp_path / "b" / "cubes")
        assert a.keys() == b.keys()
        assert all(a[k] == b[k] for k in a)


@pytest.mark.slow
class TestFullPipeline:
    def test_pipeline_completes(self, tmp_path):
        cfg = write_config(tmp_path)
        run = tmp_path / "run"
        steps = [
            ["synth", "--config", str(cfg)],
            ["pretrain", "--modality", "s1", "--config", str(cfg)],
            ["pretrain", "--modality", "s2", "--config", str(cfg)],
            ["fuse", "--config", str(cfg)],
            ["evaluate", "--split", "val", "--config", str(cfg)],
            ["embed", "--kind", "fused", "--config", str(cfg)],
            ["pca-render", "--config", str(cfg)],
            ["gpp-fixture", "--config", str(cfg)],
            ["gpp-train", "--config", str(cfg)],
            ["gpp-eval", "--config", str(cfg)],
        ]
        for step in steps:
            assert main(step) == 0, f"step failed: {step}"

        assert (run / "checkpoints" / "fusion.ckpt").is_file()
        assert (run / "gpp" / "metrics.json").is_file()
        figures = list((run / "figures").rglob("*.png"))
        assert len(figures) == 2
        for name in ("synth", "pretrain_s1", "pretrain_s2", "fuse"):
            manifest = json.loads((run / "manifests" / f"{name}.json").read_text())
            assert manifest["config_hash"] and manifest["artifacts"]

        # empty TEST split under these fractions: data error, exit 3
        assert main(["evaluate", "--split", "test", "--config", str(cfg)]) == 3

        # sweep over two bottleneck widths reuses the pretrained backbones
        assert main(["sweep-bottleneck", "--dims", "5,7", "--config", str(cfg),
                     "--set", "train_fusion.max_epochs=1"]) == 0
        rows = json.loads((run / "metrics" / "sweep_bottleneck.json").read_text())
        assert [r["fused_dim"] for r in rows] == [5, 7]
        assert all("central_mae_s1" in r and "central_mae_s2" in r for r in rows)

    def test_pretrain_rerun_reproduces_checkpoint(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["synth", "--config", str(cfg)]) == 0
        run = tmp_path / "run"
        assert main(["pretrain", "--modality", "s2", "--config", str(cfg)]) == 0
        first = (run / "checkpoints" / "s2.ckpt").read_bytes()
        assert main(["pretrain", "--modality", "s2", "--config", str(cfg)]) == 0
        assert (run / "checkpoints" / "s2.ckpt").read_bytes() == first
