import numpy as np
import pytest
import torch

from eofusion.checkpoint import (
    Checkpoint, STAGE_FUSION, STAGE_PRETRAIN_S1, STAGE_PRETRAIN_S2,
    build_model, verify_fusion_refs,
)
from eofusion.datacube import SynthSpec, generate_synthetic_scene
from eofusion.errors import IntegrityError
from eofusion.fusion import FusionConfig
from eofusion.sampling import SamplingScheme
from eofusion.trainer import (
    FusedPatchDataset, MetricsLog, PatchDataset, SplitDatasets, TrainConfig,
    evaluate, evaluate_model, pretrain_modality, train_fusion,
)

from conftest import tiny_config

SMALL_SCHEME = SamplingScheme(sequence_length=16, temporal_stride=16,
                              spatial_stride=9, frames_selected=7)


def small_scenes(n=3, seed0=20):
    spec = SynthSpec(height=24, width=24, classes=2, s2_frames=20, s1_frames=34,
                     noise=0.0, cloud_fraction=0.0)
    return [generate_synthetic_scene(spec, seed=seed0 + i) for i in range(n)]


@pytest.fixture(scope="module")
def scenes():
    return small_scenes()


def s2_datasets(scenes):
    return SplitDatasets(
        train=PatchDataset([s.s2 for s in scenes[:2]], SMALL_SCHEME),
        val=PatchDataset([scenes[2].s2 for _ in range(1)], SMALL_SCHEME),
    )


def fused_datasets(scenes):
    return SplitDatasets(
        train=FusedPatchDataset([(s.s1, s.s2) for s in scenes[:2]], SMALL_SCHEME),
        val=FusedPatchDataset([(scenes[2].s1, scenes[2].s2)], SMALL_SCHEME),
    )


def quick_config(stage, **overrides):
    kwargs = dict(stage=stage, batch_size=4, max_epochs=2, learning_rate=1e-3,
                  lr_plateau_patience=5, early_stop_patience=10, seed=1)
    kwargs.update(overrides)
    return TrainConfig(**kwargs)


@pytest.fixture(scope="module")
def s2_run(scenes):
    cfg = quick_config(STAGE_PRETRAIN_S2)
    return pretrain_modality(s2_datasets(scenes), cfg, tiny_config("S2"))


@pytest.fixture(scope="module")
def s1_run(scenes):
    datasets = SplitDatasets(
        train=PatchDataset([s.s1 for s in scenes[:2]], SMALL_SCHEME),
        val=PatchDataset([scenes[2].s1], SMALL_SCHEME),
    )
    cfg = quick_config(STAGE_PRETRAIN_S1)
    return pretrain_modality(datasets, cfg, tiny_config("S1"))


class TestCheckpointContainer:
    def test_round_trip_bit_exact(self, tmp_path, s2_run):
        ckpt, _ = s2_run
        path = tmp_path / "s2.ckpt"
        saved_hash = ckpt.save(path)
        loaded = Checkpoint.load(path)
        assert loaded.stage == ckpt.stage
        assert loaded.content_hash == saved_hash == ckpt.content_hash
        assert loaded.configs == ckpt.configs
        assert set(loaded.params) == set(ckpt.params)
        for name in ckpt.params:
            assert loaded.params[name].tobytes() == ckpt.params[name].tobytes()

    def test_corrupt_payload_detected(self, tmp_path, s2_run):
        ckpt, _ = s2_run
        path = tmp_path / "s2.ckpt"
        ckpt.save(path)
        blob = bytearray(path.read_bytes())
        blob[-3] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(IntegrityError):
            Checkpoint.load(path)

    def test_rebuilt_model_reproduces_outputs(self, tmp_path, s2_run, scenes):
        ckpt, _ = s2_run
        path = tmp_path / "s2.ckpt"
        ckpt.save(path)
        model = build_model(Checkpoint.load(path))
        datasets = s2_datasets(scenes)
        x, t = datasets.val.batch([0], selection_seed=0)
        with torch.no_grad():
            a = model.encode(x, t)
            b = build_model(ckpt).encode(x, t)
        assert torch.equal(a, b)


class TestPretrain:
    def test_zero_learning_rate_keeps_parameters(self, scenes):
        cfg = quick_config(STAGE_PRETRAIN_S2, learning_rate=0.0, max_epochs=3,
                           resample_frames_per_epoch=False)
        ckpt, log = pretrain_modality(s2_datasets(scenes), cfg, tiny_config("S2"))
        torch.manual_seed(cfg.seed)
        from eofusion.autoencoder import ModalityAutoencoder
        fresh = ModalityAutoencoder(tiny_config("S2"))
        for name, p in fresh.state_dict().items():
            assert np.array_equal(ckpt.params[name], p.numpy())
        train_losses = [v for _, v in log.series("composite", "train") if _ > 0]
        assert max(train_losses) - min(train_losses) < 1e-6

    def test_seed_fixed_runs_identical(self, scenes):
        cfg = quick_config(STAGE_PRETRAIN_S2)
        a = pretrain_modality(s2_datasets(scenes), cfg, tiny_config("S2"))
        b = pretrain_modality(s2_datasets(scenes), cfg, tiny_config("S2"))
        assert a[1].records == b[1].records
        assert a[0].content_hash == b[0].content_hash

    def test_leakage_guard(self, scenes):
        leaky = SplitDatasets(
            train=PatchDataset([s.s2 for s in scenes[:2]], SMALL_SCHEME),
            val=PatchDataset([scenes[1].s2], SMALL_SCHEME),
        )
        with pytest.raises(ValueError, match="leakage"):
            pretrain_modality(leaky, quick_config(STAGE_PRETRAIN_S2), tiny_config("S2"))

    def test_empty_dataset_rejected(self, scenes):
        small = SynthSpec(height=10, width=10, classes=2, s2_frames=20, s1_frames=30)
        empty_scene = generate_synthetic_scene(small, seed=99)
        datasets = SplitDatasets(
            train=PatchDataset([empty_scene.s2], SMALL_SCHEME),
            val=PatchDataset([scenes[2].s2], SMALL_SCHEME),
        )
        with pytest.raises(ValueError):
            pretrain_modality(datasets, quick_config(STAGE_PRETRAIN_S2), tiny_config("S2"))

    def test_metrics_composite_decomposition(self, s2_run):
        _, log = s2_run
        for rec in log.records:
            expected = sum(rec[f"weight_{k}"] * rec[k]
                           for k in ("mae", "ssim_loss", "sam"))
            assert rec["composite"] == pytest.approx(expected, abs=1e-10)

    def test_epoch_zero_recorded(self, s2_run):
        _, log = s2_run
        assert log.series("composite", "val")[0][0] == 0
        assert log.series("composite", "train")[0][0] == 0

    def test_metrics_log_round_trip(self, tmp_path, s2_run):
        _, log = s2_run
        path = tmp_path / "metrics.jsonl"
        log.save(path)
        assert MetricsLog.load(path).records == log.records


class TestEvaluate:
    def test_evaluate_twice_identical(self, s2_run, scenes):
        ckpt, _ = s2_run
        val = s2_datasets(scenes).val
        a = evaluate(ckpt, val, "VAL")
        b = evaluate(ckpt, val, "VAL")
        assert a == b

    def test_bad_split_and_empty(self, s2_run, scenes):
        ckpt, _ = s2_run
        val = s2_datasets(scenes).val
        with pytest.raises(ValueError):
            evaluate(ckpt, val, "TRAIN")
        empty = PatchDataset([], SMALL_SCHEME)
        with pytest.raises(ValueError):
            evaluate(ckpt, empty, "TEST")

    def test_identity_stub_scores_zero(self, scenes):
        class IdentityAutoencoder:
            def eval(self):
                return self

            def __call__(self, x, times):
                return None, x.clone()

        val = s2_datasets(scenes).val
        record = evaluate_model(IdentityAutoencoder(), val, STAGE_PRETRAIN_S2, "VAL")
        assert record["central_mae"] == 0.0
        assert record["context_mae"] == 0.0
        assert record["context_ssim_loss"] == pytest.approx(0.0, abs=1e-12)
        assert record["central_sam"] <= 1e-3  # arccos clamp residual
        assert record["composite"] <= 1e-3


class TestOptimizerSanity:
    def test_single_adam_step_reduces_quadratic(self):
        torch.manual_seed(3)
        target = torch.randn(12)
        x = torch.nn.Parameter(torch.randn(12))
        opt = torch.optim.Adam([x], lr=1e-2)
        with torch.no_grad():
            loss0 = float(((x - target) ** 2).sum())
        opt.zero_grad()
        ((x - target) ** 2).sum().backward()
        opt.step()
        with torch.no_grad():
            loss1 = float(((x - target) ** 2).sum())
        assert loss1 < loss0


@pytest.fixture(scope="module")
def fusion_run(scenes, s1_run, s2_run):
    cfg = quick_config(STAGE_FUSION, max_epochs=2)
    return train_fusion(fused_datasets(scenes), cfg, FusionConfig(dropout=0.0),
                        (s1_run[0], s2_run[0]))


class TestFusionTraining:
    def test_frozen_parameters_bit_identical(self, fusion_run, s1_run, s2_run):
        ckpt, _ = fusion_run
        for prefix, source in (("s1_ae.", s1_run[0]), ("s2_ae.", s2_run[0])):
            for name, arr in source.params.items():
                fused_name = prefix + name
                assert fused_name in ckpt.frozen or not fused_name.endswith(("weight", "bias"))
                assert ckpt.params[fused_name].tobytes() == arr.tobytes()

    def test_composite_decomposition(self, fusion_run):
        _, log = fusion_run
        for rec in log.records:
            expected = sum(rec[f"weight_{k}"] * rec[k]
                           for k in ("l_s1", "l_s2", "l_joint"))
            assert rec["composite"] == pytest.approx(expected, abs=1e-10)

    def test_refs_point_to_pretrained(self, fusion_run, s1_run, s2_run):
        ckpt, _ = fusion_run
        verify_fusion_refs(ckpt, s1_run[0], s2_run[0])
        with pytest.raises(IntegrityError):
            verify_fusion_refs(ckpt, s2_run[0], s1_run[0])

    def test_wrong_pretrained_stage_rejected(self, scenes, s2_run):
        cfg = quick_config(STAGE_FUSION)
        with pytest.raises(ValueError):
            train_fusion(fused_datasets(scenes), cfg, FusionConfig(),
                         (s2_run[0], s2_run[0]))

    def test_fusion_checkpoint_round_trip(self, tmp_path, fusion_run, scenes):
        ckpt, _ = fusion_run
        path = tmp_path / "fusion.ckpt"
        ckpt.save(path)
        model = build_model(Checkpoint.load(path))
        ds = fused_datasets(scenes).val
        x1, t1, x2, t2 = ds.batch([0], selection_seed=0)
        with torch.no_grad():
            e1 = model.fuse_encode(x1, t1, x2, t2)
            e2 = build_model(ckpt).fuse_encode(x1, t1, x2, t2)
        assert torch.equal(e1, e2)
