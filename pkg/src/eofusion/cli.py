"""Single entry point wiring the pipeline into reproducible subcommands.

    eofusion synth        generate the synthetic cube archive
    eofusion pretrain     stage-1 training for one modality
    eofusion fuse         stage-2 fusion training over frozen backbones
    eofusion evaluate     metrics for a checkpoint on the val/test split
    eofusion embed        dense embedding cube for one scene
    eofusion pca-render   side-by-side RGB vs PCA comparison images
    eofusion gpp-fixture  synthetic flux sites + embedding stubs
    eofusion gpp-train    GPP regressor training
    eofusion gpp-eval     GPP metrics from a saved regressor
    eofusion sweep-bottleneck   fused-dim ablation table

Every run writes a provenance manifest (config hash, seed, artifact
hashes). Exit codes: 0 ok, 2 config error, 3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import gpp as gpp_mod
from .checkpoint import (
    Checkpoint, STAGE_FUSION, STAGE_PRETRAIN_S1, STAGE_PRETRAIN_S2,
)
from .config import RunConfig, load_config
from .datacube import (
    DataCube, SynthSpec, generate_synthetic_scene, load_cube, rolling_mean_s1,
    save_cube,
)
from .embeddings import (
    embed_cube, fit_pca, load_embedding_cube, render_comparison,
    save_embedding_cube,
)
from .errors import ConfigError, DataError, DivergenceError
from .sampling import split_by_cube, TRAIN, VAL, TEST
from .trainer import (
    FusedPatchDataset, PatchDataset, SplitDatasets, evaluate, pretrain_modality,
    train_fusion,
)


# ---------------------------------------------------------------------------
# Provenance
# ---------------------------------------------------------------------------

def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _artifact_hashes(root: Path, paths: list[Path]) -> dict[str, str]:
    hashes = {}
    for p in paths:
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            hashes[str(f.relative_to(root))] = _sha256_file(f)
    return hashes


def _write_manifest(cfg: RunConfig, command: str, artifacts: list[Path]) -> None:
    root = cfg.root()
    manifest_dir = root / "manifests"
    manifest_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "artifacts": _artifact_hashes(root, artifacts),
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    (manifest_dir / f"{command}.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )


# ---------------------------------------------------------------------------
# Shared data plumbing
# ---------------------------------------------------------------------------

def _scene_ids(cfg: RunConfig) -> list[str]:
    cubes_dir = cfg.root() / "cubes"
    if not cubes_dir.is_dir():
        raise DataError(f"no cube archive at {cubes_dir}; run `synth` first")
    return sorted(p.name for p in cubes_dir.iterdir() if p.is_dir())


def _load_scene(cfg: RunConfig, scene_id: str) -> tuple[DataCube, DataCube]:
    base = cfg.root() / "cubes" / scene_id
    s1 = rolling_mean_s1(load_cube(base / "s1"), window=3)
    s2 = load_cube(base / "s2")
    return s1, s2


def _split_scenes(cfg: RunConfig) -> dict[str, list[str]]:
    ids = _scene_ids(cfg)
    split = split_by_cube(ids, tuple(cfg.sampling.fractions), seed=cfg.seed)
    return {name: split.ids(name) for name in (TRAIN, VAL, TEST)}


def _pretrain_datasets(cfg: RunConfig, modality: str) -> SplitDatasets:
    scheme = (cfg.sampling.s1 if modality == "S1" else cfg.sampling.s2).build()
    policy = cfg.sampling.policy()
    buckets = _split_scenes(cfg)

    def cubes(ids):
        out = []
        for sid in ids:
            s1, s2 = _load_scene(cfg, sid)
            out.append(s1 if modality == "S1" else s2)
        return out

    return SplitDatasets(
        train=PatchDataset(cubes(buckets[TRAIN]), scheme, policy),
        val=PatchDataset(cubes(buckets[VAL]), scheme, policy),
        test=PatchDataset(cubes(buckets[TEST]), scheme, policy) if buckets[TEST] else None,
    )


def _fused_datasets(cfg: RunConfig) -> SplitDatasets:
    scheme = cfg.sampling.s2.build()
    policy = cfg.sampling.policy()
    buckets = _split_scenes(cfg)

    def pairs(ids):
        return [_load_scene(cfg, sid) for sid in ids]

    return SplitDatasets(
        train=FusedPatchDataset(pairs(buckets[TRAIN]), scheme, policy),
        val=FusedPatchDataset(pairs(buckets[VAL]), scheme, policy),
        test=FusedPatchDataset(pairs(buckets[TEST]), scheme, policy) if buckets[TEST] else None,
    )


def _checkpoint_path(cfg: RunConfig, stage: str) -> Path:
    name = {STAGE_PRETRAIN_S1: "s1", STAGE_PRETRAIN_S2: "s2", STAGE_FUSION: "fusion"}[stage]
    return cfg.root() / "checkpoints" / f"{name}.ckpt"


def _load_checkpoint(cfg: RunConfig, stage: str) -> Checkpoint:
    path = _checkpoint_path(cfg, stage)
    if not path.is_file():
        raise DataError(f"missing checkpoint {path}; run the earlier stage first")
    return Checkpoint.load(path)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    root = cfg.root()
    s = cfg.synth
    artifacts = []
    for i in range(s.n_scenes):
        seed = cfg.seed + i
        spec = SynthSpec(
            height=s.height, width=s.width, classes=s.classes,
            s2_frames=s.s2_frames, s1_frames=s.s1_frames, noise=s.noise,
            amp_range=tuple(s.amp_range), cloud_fraction=s.cloud_fraction,
            cube_id_prefix="scene", world_seed=s.world_seed,
        )
        scene = generate_synthetic_scene(spec, seed=seed)
        scene_dir = root / "cubes" / f"scene-{seed:05d}"
        save_cube(scene.s1, scene_dir / "s1")
        save_cube(scene.s2, scene_dir / "s2")
        np.save(scene_dir / "class_map.npy", scene.class_map)
        artifacts.append(scene_dir)
    _write_manifest(cfg, "synth", artifacts)
    print(f"wrote {s.n_scenes} scenes under {root / 'cubes'}")
    return 0


def cmd_pretrain(cfg: RunConfig, modality: str) -> int:
    modality = modality.upper()
    stage = STAGE_PRETRAIN_S1 if modality == "S1" else STAGE_PRETRAIN_S2
    section = cfg.train_s1 if modality == "S1" else cfg.train_s2
    datasets = _pretrain_datasets(cfg, modality)
    model_cfg = (cfg.model_s1 if modality == "S1" else cfg.model_s2).build(modality)
    ckpt, log = pretrain_modality(datasets, section.build(stage, cfg.seed), model_cfg)

    root = cfg.root()
    ckpt_path = _checkpoint_path(cfg, stage)
    ckpt.save(ckpt_path)
    metrics_path = root / "metrics" / f"pretrain_{modality.lower()}.jsonl"
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    log.save(metrics_path)
    _write_manifest(cfg, f"pretrain_{modality.lower()}", [ckpt_path, metrics_path])
    best = min(v for _, v in log.series("central_mae", "val"))
    print(f"{stage}: best val central MAE {best:.6f} -> {ckpt_path}")
    return 0


def cmd_fuse(cfg: RunConfig, fused_dim: int | None = None,
             tag: str | None = None) -> int:
    datasets = _fused_datasets(cfg)
    pretrained = (_load_checkpoint(cfg, STAGE_PRETRAIN_S1),
                  _load_checkpoint(cfg, STAGE_PRETRAIN_S2))
    fusion_cfg = cfg.fusion.build(fused_dim)
    ckpt, log = train_fusion(datasets, cfg.train_fusion.build(STAGE_FUSION, cfg.seed),
                             fusion_cfg, pretrained)
    root = cfg.root()
    ckpt_path = root / "checkpoints" / (f"fusion_{tag}.ckpt" if tag else "fusion.ckpt")
    ckpt.save(ckpt_path)
    metrics_path = root / "metrics" / (f"fusion_{tag}.jsonl" if tag else "fusion.jsonl")
    metrics_path.parent.mkdir(parents=True, exist_ok=True)
    log.save(metrics_path)
    _write_manifest(cfg, f"fuse_{tag}" if tag else "fuse", [ckpt_path, metrics_path])
    best = min(v for _, v in log.series("central_mae", "val"))
    print(f"{STAGE_FUSION}: best val central MAE {best:.6f} -> {ckpt_path}")
    return 0


def cmd_evaluate(cfg: RunConfig, split: str, stage_name: str) -> int:
    stage = {"s1": STAGE_PRETRAIN_S1, "s2": STAGE_PRETRAIN_S2,
             "fusion": STAGE_FUSION}[stage_name]
    ckpt = _load_checkpoint(cfg, stage)
    split = split.upper()
    if stage == STAGE_FUSION:
        datasets = _fused_datasets(cfg)
    else:
        datasets = _pretrain_datasets(cfg, "S1" if stage == STAGE_PRETRAIN_S1 else "S2")
    dataset = datasets.val if split == VAL else datasets.test
    if dataset is None:
        raise ValueError(f"the {split} split holds no scenes under the current fractions")
    record = evaluate(ckpt, dataset, split)
    out = cfg.root() / "metrics" / f"eval_{stage_name}_{split.lower()}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")
    _write_manifest(cfg, f"evaluate_{stage_name}_{split.lower()}", [out])
    print(json.dumps(record, sort_keys=True))
    return 0


def _default_embed_scene(cfg: RunConfig) -> str:
    buckets = _split_scenes(cfg)
    return (buckets[VAL] or buckets[TRAIN])[0]


def cmd_embed(cfg: RunConfig, kind: str, scene_id: str | None) -> int:
    stage = {"s1": STAGE_PRETRAIN_S1, "s2": STAGE_PRETRAIN_S2,
             "fused": STAGE_FUSION}[kind]
    ckpt = _load_checkpoint(cfg, stage)
    scene_id = scene_id or _default_embed_scene(cfg)
    s1, s2 = _load_scene(cfg, scene_id)
    emb = embed_cube(s1, s2, ckpt, frames=cfg.embed.frames,
                     pixel_batch=cfg.embed.pixel_batch)
    out = cfg.root() / "embeddings" / f"{scene_id}_{kind}"
    save_embedding_cube(emb, out)
    _write_manifest(cfg, f"embed_{kind}", [out])
    print(f"embedded {scene_id} ({kind}) -> {out}")
    return 0


def cmd_pca_render(cfg: RunConfig, kind: str, scene_id: str | None,
                   frame: int | None) -> int:
    scene_id = scene_id or _default_embed_scene(cfg)
    emb_dir = cfg.root() / "embeddings" / f"{scene_id}_{kind}"
    if not emb_dir.is_dir():
        raise DataError(f"no embedding cube at {emb_dir}; run `embed` first")
    emb = load_embedding_cube(emb_dir)
    _, s2 = _load_scene(cfg, scene_id)
    if frame is None:
        # default frame choice: highest joint data availability
        avail = emb.valid.mean(axis=(1, 2)) + s2.mask.mean(axis=(1, 2))
        frame = int(np.argmax(avail))
    out_dir = cfg.root() / "figures" / scene_id
    rgb_path, pca_path = render_comparison(emb, s2, frame, out_dir, seed=cfg.seed)
    _write_manifest(cfg, f"pca_render_{kind}", [rgb_path, pca_path])
    print(f"wrote {rgb_path} and {pca_path}")
    return 0


def cmd_gpp_fixture(cfg: RunConfig) -> int:
    root = cfg.root()
    fixtures = gpp_mod.generate_flux_fixture(seed=cfg.seed, sites=cfg.gpp.sites)
    sites_dir = root / "gpp" / "sites"
    sites_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    artifacts = []
    for fx in fixtures:
        csv_path = sites_dir / f"{fx.flux.site_id}.csv"
        gpp_mod.save_flux_csv(fx.flux, csv_path)
        emb_dir = root / "gpp" / "embeddings" / fx.flux.site_id
        save_embedding_cube(fx.embeddings, emb_dir)
        index[fx.flux.site_id] = fx.flux.vegetation_type
        artifacts.extend([csv_path, emb_dir])
    index_path = root / "gpp" / "sites.json"
    index_path.write_text(json.dumps(index, sort_keys=True, indent=2) + "\n")
    artifacts.append(index_path)
    _write_manifest(cfg, "gpp_fixture", artifacts)
    print(f"wrote {len(fixtures)} flux sites under {root / 'gpp'}")
    return 0


def _gpp_samples(cfg: RunConfig) -> list:
    root = cfg.root()
    index_path = root / "gpp" / "sites.json"
    if not index_path.is_file():
        raise DataError(f"no flux sites at {index_path}; run `gpp-fixture` first")
    index = json.loads(index_path.read_text())
    samples = []
    for site_id, veg in sorted(index.items()):
        flux = gpp_mod.load_flux_csv(root / "gpp" / "sites" / f"{site_id}.csv",
                                     site_id, veg)
        filtered = gpp_mod.quality_filter(flux, cfg.gpp.qc_threshold)
        emb = load_embedding_cube(root / "gpp" / "embeddings" / site_id)
        center = (emb.e.shape[1] // 2, emb.e.shape[2] // 2)
        times, values = gpp_mod.footprint_average(emb, center,
                                                  cfg.gpp.footprint_half_size)
        daily = gpp_mod.interpolate_embeddings(values, times)
        samples.extend(gpp_mod.build_sequences(daily, filtered,
                                               cfg.gpp.window, cfg.gpp.stride))
    return samples


def cmd_gpp_train(cfg: RunConfig) -> int:
    samples = _gpp_samples(cfg)
    ckpt, metrics = gpp_mod.train_gpp(
        samples, config=cfg.gpp.build_model_config(), epochs=cfg.gpp.epochs,
        learning_rate=cfg.gpp.learning_rate, batch_size=cfg.gpp.batch_size,
        seed=cfg.seed,
    )
    root = cfg.root()
    ckpt_path = root / "gpp" / "model.ckpt"
    ckpt.save(ckpt_path)
    metrics_path = root / "gpp" / "metrics.json"
    gpp_mod.save_gpp_metrics(metrics, metrics_path)
    _write_manifest(cfg, "gpp_train", [ckpt_path, metrics_path])
    print(json.dumps({k: metrics[k] for k in ("train", "val")}, sort_keys=True))
    return 0


def cmd_gpp_eval(cfg: RunConfig) -> int:
    root = cfg.root()
    ckpt_path = root / "gpp" / "model.ckpt"
    if not ckpt_path.is_file():
        raise DataError(f"missing GPP model at {ckpt_path}; run `gpp-train` first")
    ckpt = Checkpoint.load(ckpt_path)
    samples = _gpp_samples(cfg)
    val = [s for s in samples if s.year == 2020]
    if not val:
        raise ValueError("no validation-year samples available")
    pred = gpp_mod.predict_gpp(ckpt, val)
    target = np.array([s.target for s in val])
    record = {"val": {"rmse": gpp_mod.rmse(pred, target),
                      "nrmse": gpp_mod.nrmse(pred, target), "n": len(val)}}
    out = root / "gpp" / "eval.json"
    gpp_mod.save_gpp_metrics(record, out)
    _write_manifest(cfg, "gpp_eval", [out])
    print(json.dumps(record, sort_keys=True))
    return 0


def cmd_sweep_bottleneck(cfg: RunConfig, dims: list[int]) -> int:
    datasets = _fused_datasets(cfg)
    pretrained = (_load_checkpoint(cfg, STAGE_PRETRAIN_S1),
                  _load_checkpoint(cfg, STAGE_PRETRAIN_S2))
    rows = []
    for dim in dims:
        fusion_cfg = cfg.fusion.build(fused_dim=dim)
        _, log = train_fusion(datasets, cfg.train_fusion.build(STAGE_FUSION, cfg.seed),
                              fusion_cfg, pretrained)
        val = [r for r in log.records if r["split"] == "val"]
        best = min(val, key=lambda r: r["central_mae"])
        rows.append({"fused_dim": dim,
                     "central_mae": best["central_mae"],
                     "central_mae_s1": best["central_mae_s1"],
                     "central_mae_s2": best["central_mae_s2"]})
    out = cfg.root() / "metrics" / "sweep_bottleneck.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    _write_manifest(cfg, "sweep_bottleneck", [out])
    print(f"{'dim':>4} {'central_mae':>12} {'s1':>10} {'s2':>10}")
    for row in rows:
        print(f"{row['fused_dim']:>4} {row['central_mae']:>12.6f} "
              f"{row['central_mae_s1']:>10.6f} {row['central_mae_s2']:>10.6f}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None,
                        help="JSON run config (defaults apply when omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY.PATH=VALUE", help="override a config leaf")
    common.add_argument("--seed", type=int, default=None, help="override the run seed")
    common.add_argument("--out", type=str, default=None,
                        help="override data_root (also honours $EOFUSION_DATA_ROOT)")
    common.add_argument("--workers", type=int, default=None,
                        help="thread budget when determinism is off")
    common.add_argument("--deterministic", dest="deterministic",
                        action=argparse.BooleanOptionalAction, default=None,
                        help="force single-threaded numerics")

    parser = argparse.ArgumentParser(prog="eofusion", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common])
    p = sub.add_parser("pretrain", parents=[common])
    p.add_argument("--modality", choices=["s1", "s2"], required=True)
    sub.add_parser("fuse", parents=[common])
    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--split", choices=["val", "test"], required=True)
    p.add_argument("--stage", choices=["s1", "s2", "fusion"], default="fusion")
    p = sub.add_parser("embed", parents=[common])
    p.add_argument("--kind", choices=["s1", "s2", "fused"], required=True)
    p.add_argument("--scene", type=str, default=None)
    p = sub.add_parser("pca-render", parents=[common])
    p.add_argument("--kind", choices=["s1", "s2", "fused"], default="fused")
    p.add_argument("--scene", type=str, default=None)
    p.add_argument("--frame", type=int, default=None)
    sub.add_parser("gpp-fixture", parents=[common])
    sub.add_parser("gpp-train", parents=[common])
    sub.add_parser("gpp-eval", parents=[common])
    p = sub.add_parser("sweep-bottleneck", parents=[common])
    p.add_argument("--dims", type=str, required=True,
                   help="comma-separated fused bottleneck widths, e.g. 5,6,7,8,9")
    return parser


_CONFIG_REQUIRED = {"pretrain", "fuse", "evaluate", "embed", "pca-render",
                    "gpp-train", "gpp-eval", "sweep-bottleneck"}


def _resolve_config(args) -> RunConfig:
    if args.config is None and args.command in _CONFIG_REQUIRED:
        raise ConfigError(f"`{args.command}` needs --config")
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, data_root=args.out)
    if args.deterministic is not None:
        for section in (cfg.train_s1, cfg.train_s2, cfg.train_fusion):
            section.deterministic = args.deterministic
    if args.workers is not None and args.deterministic is False:
        torch.set_num_threads(args.workers)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, args.modality)
        if args.command == "fuse":
            return cmd_fuse(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.split, args.stage)
        if args.command == "embed":
            return cmd_embed(cfg, args.kind, args.scene)
        if args.command == "pca-render":
            return cmd_pca_render(cfg, args.kind, args.scene, args.frame)
        if args.command == "gpp-fixture":
            return cmd_gpp_fixture(cfg)
        if args.command == "gpp-train":
            return cmd_gpp_train(cfg)
        if args.command == "gpp-eval":
            return cmd_gpp_eval(cfg)
        if args.command == "sweep-bottleneck":
            dims = [int(d) for d in args.dims.split(",") if d]
            return cmd_sweep_bottleneck(cfg, dims)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        ckpt = getattr(exc, "checkpoint", None)
        if ckpt is not None:
            path = cfg.root() / "checkpoints" / "last_good.ckpt"
            ckpt.save(path)
            print(f"divergence: {exc}; kept {path}", file=sys.stderr)
        else:
            print(f"divergence: {exc}", file=sys.stderr)
        return 4
    except (DataError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
