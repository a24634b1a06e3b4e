"""Staged training: per-modality pretraining, then frozen-backbone fusion.

Stage 1 trains each modality autoencoder with its context-aware loss
(weighted MAE for radar, the MAE/SSIM/SAM hybrid for optical). Stage 2
assembles the two pretrained autoencoders, freezes them, and optimizes
only the fusion layers under the composite fusion objective with boosted
center weights. Validation tracks central-pixel and context metrics
separately; the best-validation checkpoint is retained.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace as dc_replace
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .autoencoder import ModalityAutoencoder, ModalityConfig
from .checkpoint import (
    Checkpoint, STAGE_FUSION, STAGE_PRETRAIN_S1, STAGE_PRETRAIN_S2,
)
from .datacube import DataCube
from .errors import DivergenceError, IntegrityError
from .fusion import FusionConfig, FusionModel, trainable_parameter_partition
from .losses import (
    LossBreakdown, context_weights, fusion_losses, hybrid_s2_pretrain_loss,
    s1_pretrain_loss,
)
from .sampling import (
    EligibilityPolicy, FusedSample, PatchSample, SamplingScheme, WindowIndex,
    enumerate_fused_windows, enumerate_windows, extract_fused_sample,
    subselect_frames, TRAIN, VAL, TEST,
)

_SEED_STRIDE = 1_000_003  # mixes (run seed, epoch) into per-sample selection seeds


@dataclass
class TrainConfig:
    stage: str  # PRETRAIN_S1 | PRETRAIN_S2 | FUSION
    batch_size: int = 8
    max_epochs: int = 50
    learning_rate: float = 1e-3
    lr_plateau_patience: int = 10
    early_stop_patience: int = 25
    seed: int = 0
    resample_frames_per_epoch: bool = True
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsLog:
    """Per-epoch train/val metric records, one JSON object per line on disk."""

    records: list[dict] = field(default_factory=list)

    def append(self, stage: str, epoch: int, split: str, metrics: dict) -> None:
        last = [r for r in self.records if r["stage"] == stage and r["split"] == split]
        if last and epoch < last[-1]["epoch"]:
            raise ValueError("epoch indices must be monotone within a stage/split")
        self.records.append({"stage": stage, "epoch": epoch, "split": split, **metrics})

    def series(self, key: str, split: str, stage: str | None = None) -> list[tuple[int, float]]:
        return [(r["epoch"], r[key]) for r in self.records
                if r["split"] == split and (stage is None or r["stage"] == stage)]

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MetricsLog":
        with open(path) as fh:
            return cls(records=[json.loads(line) for line in fh if line.strip()])


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def _with_global_ordinals(per_cube: list[list[WindowIndex]]) -> list:
    flat, i = [], 0
    for windows in per_cube:
        for w in windows:
            flat.append(dc_replace(w, ordinal=i))
            i += 1
    return flat


class PatchDataset:
    """All sampling windows of one split for one modality."""

    def __init__(self, cubes: list[DataCube], scheme: SamplingScheme,
                 policy: EligibilityPolicy | None = None):
        self.cubes = {c.cube_id: c for c in cubes}
        self.scheme = scheme
        self.policy = policy or EligibilityPolicy()
        per_cube = [enumerate_windows(c, scheme, self.policy) for c in cubes]
        self.windows = _with_global_ordinals(per_cube)

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def cube_ids(self) -> set[str]:
        return set(self.cubes)

    def sample(self, i: int, selection_seed: int) -> PatchSample:
        w = self.windows[i]
        return subselect_frames(self.cubes[w.cube_id], w, self.scheme.frames_selected,
                                selection_seed, self.policy)

    def batch(self, idxs, selection_seed: int) -> tuple[Tensor, Tensor]:
        samples = [self.sample(i, selection_seed) for i in idxs]
        x = torch.from_numpy(np.stack([s.values for s in samples]).astype(np.float32))
        t = torch.from_numpy(np.stack([s.times for s in samples]).astype(np.float32))
        return x, t


class FusedPatchDataset:
    """Aligned S1/S2 window pairs of one split, on the S2 timeline."""

    def __init__(self, scene_pairs: list[tuple[DataCube, DataCube]],
                 scheme: SamplingScheme, policy: EligibilityPolicy | None = None):
        self.pairs = {s2.cube_id: (s1, s2) for s1, s2 in scene_pairs}
        self.scheme = scheme
        self.policy = policy or EligibilityPolicy()
        per_pair = [enumerate_fused_windows(s1, s2, scheme, self.policy)
                    for s1, s2 in scene_pairs]
        self.windows = _with_global_ordinals(per_pair)

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def cube_ids(self) -> set[str]:
        ids = set()
        for s1, s2 in self.pairs.values():
            ids.update((s1.cube_id, s2.cube_id))
        return ids

    def sample(self, i: int, selection_seed: int) -> FusedSample:
        w = self.windows[i]
        s1, s2 = self.pairs[w.cube_id]
        return extract_fused_sample(s1, s2, w, self.scheme.frames_selected,
                                    selection_seed, self.policy)

    def batch(self, idxs, selection_seed: int) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        samples = [self.sample(i, selection_seed) for i in idxs]
        x1 = torch.from_numpy(np.stack([s.s1.values for s in samples]).astype(np.float32))
        t1 = torch.from_numpy(np.stack([s.s1.times for s in samples]).astype(np.float32))
        x2 = torch.from_numpy(np.stack([s.s2.values for s in samples]).astype(np.float32))
        t2 = torch.from_numpy(np.stack([s.s2.times for s in samples]).astype(np.float32))
        return x1, t1, x2, t2


@dataclass
class SplitDatasets:
    train: PatchDataset | FusedPatchDataset
    val: PatchDataset | FusedPatchDataset
    test: PatchDataset | FusedPatchDataset | None = None

    def check_leakage(self) -> None:
        parts = [("train", self.train), ("val", self.val)]
        if self.test is not None:
            parts.append(("test", self.test))
        for i in range(len(parts)):
            for j in range(i + 1, len(parts)):
                overlap = parts[i][1].cube_ids & parts[j][1].cube_ids
                if overlap:
                    raise ValueError(
                        f"cube leakage between {parts[i][0]} and {parts[j][0]}: {sorted(overlap)}"
                    )


# ---------------------------------------------------------------------------
# Loss selection and metric accumulation
# ---------------------------------------------------------------------------

def _pretrain_loss_fn(stage: str, frames: int):
    w = context_weights(frames, 15, 15)
    if stage == STAGE_PRETRAIN_S1:
        return lambda x, x_hat: s1_pretrain_loss(x, x_hat, w)
    return lambda x, x_hat: hybrid_s2_pretrain_loss(x, x_hat, w)


class _Accumulator:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.n = 0

    def add(self, breakdown: LossBreakdown, count: int) -> None:
        for key, value in breakdown.to_dict().items():
            self.sums[key] = self.sums.get(key, 0.0) + value * count
        self.n += count

    def means(self) -> dict[str, float]:
        return {k: v / self.n for k, v in self.sums.items()}


def _selection_seed(config: TrainConfig, epoch: int) -> int:
    return config.seed * _SEED_STRIDE + (epoch if config.resample_frames_per_epoch else 0)


def _batched(n: int, batch_size: int, order=None):
    idxs = list(range(n)) if order is None else list(order)
    for start in range(0, n, batch_size):
        yield idxs[start:start + batch_size]


def _forward(model, dataset, idxs, selection_seed: int):
    if isinstance(dataset, FusedPatchDataset):
        x1, t1, x2, t2 = dataset.batch(idxs, selection_seed)
        _, xh1, xh2 = model(x1, t1, x2, t2)
        return fusion_losses(x1, xh1, x2, xh2)
    x, t = dataset.batch(idxs, selection_seed)
    _, x_hat = model(x, t)
    stage = STAGE_PRETRAIN_S1 if dataset.cubes[next(iter(dataset.cubes))].modality == "S1" \
        else STAGE_PRETRAIN_S2
    loss_fn = _pretrain_loss_fn(stage, dataset.scheme.frames_selected)
    return loss_fn(x, x_hat)


@torch.no_grad()
def _run_eval(model, dataset, selection_seed: int, batch_size: int) -> dict:
    model.eval()
    acc = _Accumulator()
    for idxs in _batched(len(dataset), batch_size):
        acc.add(_forward(model, dataset, idxs, selection_seed), len(idxs))
    return acc.means()


# ---------------------------------------------------------------------------
# Stage 1: modality pretraining
# ---------------------------------------------------------------------------

def _setup_determinism(config: TrainConfig) -> None:
    if config.deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(config.seed)


def _divergence(best_ckpt: Checkpoint | None, epoch: int) -> DivergenceError:
    err = DivergenceError(f"non-finite loss at epoch {epoch}; last good checkpoint retained")
    err.checkpoint = best_ckpt
    return err


def pretrain_modality(datasets: SplitDatasets, config: TrainConfig,
                      modality_config: ModalityConfig) -> tuple[Checkpoint, MetricsLog]:
    """Train one modality autoencoder; returns the best-validation checkpoint."""
    if config.stage not in (STAGE_PRETRAIN_S1, STAGE_PRETRAIN_S2):
        raise ValueError(f"pretraining stage expected, got {config.stage}")
    if len(datasets.train) == 0 or len(datasets.val) == 0:
        raise ValueError("pretraining needs non-empty train and val datasets")
    datasets.check_leakage()
    _setup_determinism(config)

    model = ModalityAutoencoder(modality_config)
    loss_fn = _pretrain_loss_fn(config.stage, datasets.train.scheme.frames_selected)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    configs = {"modality": modality_config.to_dict(), "train": config.to_dict()}

    log = MetricsLog()
    eval_seed = _selection_seed(config, 0)

    def validate(epoch: int) -> float:
        record = _run_eval(model, datasets.val, eval_seed, config.batch_size)
        log.append(config.stage, epoch, "val", record)
        return record["central_mae"]

    log.append(config.stage, 0, "train",
               _run_eval(model, datasets.train, eval_seed, config.batch_size))
    best_metric = validate(0)
    best_ckpt = Checkpoint.from_model(model, config.stage, configs)
    epochs_since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(datasets.train))
        sel_seed = _selection_seed(config, epoch)
        acc = _Accumulator()
        for idxs in _batched(len(datasets.train), config.batch_size, order):
            x, t = datasets.train.batch(idxs, sel_seed)
            optimizer.zero_grad()
            _, x_hat = model(x, t)
            breakdown = loss_fn(x, x_hat)
            if not torch.isfinite(breakdown.composite):
                raise _divergence(best_ckpt, epoch)
            breakdown.composite.backward()
            optimizer.step()
            acc.add(breakdown, len(idxs))
        log.append(config.stage, epoch, "train", acc.means())

        val_metric = validate(epoch)
        if val_metric < best_metric - 1e-12:
            best_metric = val_metric
            best_ckpt = Checkpoint.from_model(model, config.stage, configs)
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best % config.lr_plateau_patience == 0:
                for group in optimizer.param_groups:
                    group["lr"] *= 0.5
            if epochs_since_best >= config.early_stop_patience:
                break
    return best_ckpt, log


# ---------------------------------------------------------------------------
# Stage 2: fusion training over frozen backbones
# ---------------------------------------------------------------------------

def _frozen_snapshot(model: FusionModel) -> dict[str, bytes]:
    return {name: p.detach().numpy().tobytes()
            for name, p in model.named_parameters() if not p.requires_grad}


def _check_frozen(model: FusionModel, snapshot: dict[str, bytes], epoch: int) -> None:
    for name, p in model.named_parameters():
        if not p.requires_grad and p.detach().numpy().tobytes() != snapshot[name]:
            raise IntegrityError(f"frozen parameter {name} changed by epoch {epoch}")


def train_fusion(datasets: SplitDatasets, config: TrainConfig,
                 fusion_config: FusionConfig,
                 pretrained: tuple[Checkpoint, Checkpoint]) -> tuple[Checkpoint, MetricsLog]:
    """Optimize only the fusion layers on top of two frozen pretrained models."""
    if config.stage != STAGE_FUSION:
        raise ValueError(f"fusion stage expected, got {config.stage}")
    ckpt_s1, ckpt_s2 = pretrained
    if ckpt_s1.stage != STAGE_PRETRAIN_S1 or ckpt_s2.stage != STAGE_PRETRAIN_S2:
        raise ValueError("pretrained checkpoints must be (PRETRAIN_S1, PRETRAIN_S2)")
    if len(datasets.train) == 0 or len(datasets.val) == 0:
        raise ValueError("fusion training needs non-empty train and val datasets")
    datasets.check_leakage()
    _setup_determinism(config)

    from .checkpoint import build_model
    s1_ae = build_model(ckpt_s1)
    s2_ae = build_model(ckpt_s2)
    model = FusionModel(s1_ae, s2_ae, fusion_config)
    trainable_parameter_partition(model)  # raises if the freeze split is inconsistent
    snapshot = _frozen_snapshot(model)

    optimizer = torch.optim.Adam(
        (p for p in model.parameters() if p.requires_grad), lr=config.learning_rate
    )
    configs = {
        "s1": ckpt_s1.configs["modality"],
        "s2": ckpt_s2.configs["modality"],
        "fusion": fusion_config.to_dict(),
        "train": config.to_dict(),
    }
    refs = {"s1": ckpt_s1.content_hash, "s2": ckpt_s2.content_hash}

    log = MetricsLog()
    eval_seed = _selection_seed(config, 0)

    def validate(epoch: int) -> float:
        record = _run_eval(model, datasets.val, eval_seed, config.batch_size)
        log.append(STAGE_FUSION, epoch, "val", record)
        return record["central_mae"]

    log.append(STAGE_FUSION, 0, "train",
               _run_eval(model, datasets.train, eval_seed, config.batch_size))
    best_metric = validate(0)
    best_ckpt = Checkpoint.from_model(model, STAGE_FUSION, configs, refs)
    epochs_since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(datasets.train))
        sel_seed = _selection_seed(config, epoch)
        acc = _Accumulator()
        for idxs in _batched(len(datasets.train), config.batch_size, order):
            x1, t1, x2, t2 = datasets.train.batch(idxs, sel_seed)
            optimizer.zero_grad()
            _, xh1, xh2 = model(x1, t1, x2, t2)
            breakdown = fusion_losses(x1, xh1, x2, xh2)
            if not torch.isfinite(breakdown.composite):
                raise _divergence(best_ckpt, epoch)
            breakdown.composite.backward()
            optimizer.step()
            acc.add(breakdown, len(idxs))
        _check_frozen(model, snapshot, epoch)
        log.append(STAGE_FUSION, epoch, "train", acc.means())

        val_metric = validate(epoch)
        if val_metric < best_metric - 1e-12:
            best_metric = val_metric
            best_ckpt = Checkpoint.from_model(model, STAGE_FUSION, configs, refs)
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best % config.lr_plateau_patience == 0:
                for group in optimizer.param_groups:
                    group["lr"] *= 0.5
            if epochs_since_best >= config.early_stop_patience:
                break
    return best_ckpt, log


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_model(model, dataset, stage: str, split: str,
                   selection_seed: int = 0, batch_size: int = 8) -> dict:
    """Metric record for any forward-compatible model; never mutates parameters."""
    record = _run_eval(model, dataset, selection_seed, batch_size)
    return {"stage": stage, "split": split, **record}


def evaluate(checkpoint: Checkpoint, dataset, split: str,
             selection_seed: int = 0, batch_size: int = 8) -> dict:
    """Evaluate a checkpoint on a VAL or TEST dataset."""
    if split not in (VAL, TEST):
        raise ValueError(f"split must be VAL or TEST, got {split!r}")
    if len(dataset) == 0:
        raise ValueError(f"{split} dataset is empty")
    from .checkpoint import build_model
    model = build_model(checkpoint)
    return evaluate_model(model, dataset, checkpoint.stage, split,
                          selection_seed, batch_size)
