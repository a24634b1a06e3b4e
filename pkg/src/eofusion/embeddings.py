"""Dense per-pixel embedding cubes and the qualitative PCA rendering.

Slides the frozen encoder(s) over a full cube: every valid center pixel
gets the latent vector of its 15x15 x 11-frame context patch (borders are
reflection-padded). A per-scene PCA over the valid embedding vectors feeds
the side-by-side RGB vs principal-component comparison images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import (
    Checkpoint, STAGE_FUSION, STAGE_PRETRAIN_S1, STAGE_PRETRAIN_S2, build_model,
)
from .datacube import DataCube
from .errors import FormatError, IntegrityError
from .sampling import PATCH_HALF, PATCH_SIZE, align_modalities

EMBED_FRAMES = 11  # temporal context length, matching the training patches
KINDS = {STAGE_PRETRAIN_S1: "s1", STAGE_PRETRAIN_S2: "s2", STAGE_FUSION: "fused"}


@dataclass
class EmbeddingCube:
    """Per-pixel, per-acquisition latent features on a source cube's grid."""

    e: np.ndarray  # float32 [T, H, W, D], NaN where the source pixel was invalid
    times: np.ndarray  # float64 [T]
    cube_id: str
    kind: str  # "s1" | "s2" | "fused"
    model_hash: str

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.e).all(axis=-1)


def save_embedding_cube(cube: EmbeddingCube, path: str | Path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    t, h, w, d = cube.e.shape
    manifest = {
        "format_version": 1,
        "cube_id": cube.cube_id,
        "kind": cube.kind,
        "model_hash": cube.model_hash,
        "shape": [t, h, w, d],
        "band_names": [f"e{i}" for i in range(d)],
        "dtype": "f32le",
        "files": {"values": "values.bin", "times": "times.bin", "mask": "mask.bin"},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    (out / "values.bin").write_bytes(np.ascontiguousarray(cube.e, dtype="<f4").tobytes())
    (out / "times.bin").write_bytes(np.ascontiguousarray(cube.times, dtype="<f8").tobytes())
    (out / "mask.bin").write_bytes(cube.valid.astype(np.uint8).tobytes())


def load_embedding_cube(path: str | Path) -> EmbeddingCube:
    root = Path(path)
    manifest_file = root / "manifest.json"
    if not manifest_file.is_file():
        raise FormatError(f"missing manifest.json in {root}")
    manifest = json.loads(manifest_file.read_text())
    t, h, w, d = manifest["shape"]
    e = np.frombuffer((root / "values.bin").read_bytes(), dtype="<f4")
    times = np.frombuffer((root / "times.bin").read_bytes(), dtype="<f8")
    if e.size != t * h * w * d or times.size != t:
        raise IntegrityError(f"array sizes disagree with the manifest in {root}")
    return EmbeddingCube(
        e=e.reshape(t, h, w, d).copy(),
        times=times.copy(),
        cube_id=manifest["cube_id"],
        kind=manifest["kind"],
        model_hash=manifest["model_hash"],
    )


# ---------------------------------------------------------------------------
# Dense embedding
# ---------------------------------------------------------------------------

def _reflect_pad(cube: DataCube) -> tuple[np.ndarray, np.ndarray]:
    p = PATCH_HALF
    vals = np.pad(cube.values, ((0, 0), (p, p), (p, p), (0, 0)), mode="reflect")
    mask = np.pad(cube.mask, ((0, 0), (p, p), (p, p)), mode="reflect")
    return vals, mask

def _window_around(t: int, n_frames: int) -> list[int]:
    lo = min(max(t - EMBED_FRAMES // 2, 0), n_frames - EMBED_FRAMES)
    return list(range(lo, lo + EMBED_FRAMES))


def _patch_stack(vals: np.ndarray, mask: np.ndarray, frames: list[int]) -> np.ndarray:
    """All 15x15 patches of the selected frames: [H*W, T_w, 15, 15, C].

    Invalid pixels are filled per (frame, band) with the valid-pixel mean of
    that slice, falling back to the band mean and then to mid-range.
    """
    sel = np.where(mask[frames][..., None], vals[frames], np.nan)
    tw, hp, wp, c = sel.shape
    if np.isnan(sel).any():
        with np.errstate(invalid="ignore"):
            frame_means = np.nanmean(sel.reshape(tw, -1, c), axis=1)  # [T_w, C]
            band_means = np.nanmean(frame_means, axis=0)  # [C]
        band_means = np.where(np.isfinite(band_means), band_means, 0.5)
        frame_means = np.where(np.isfinite(frame_means), frame_means, band_means)
        sel = np.where(np.isnan(sel), frame_means[:, None, None, :], sel)
    windows = np.lib.stride_tricks.sliding_window_view(sel, (PATCH_SIZE, PATCH_SIZE), axis=(1, 2))
    # -> [T_w, H, W, C, 15, 15]; regroup to pixel-major patches
    windows = np.moveaxis(windows, 3, -1)  # [T_w, H, W, 15, 15, C]
    h, w = windows.shape[1:3]
    return np.ascontiguousarray(
        windows.transpose(1, 2, 0, 3, 4, 5).reshape(h * w, tw, PATCH_SIZE, PATCH_SIZE, c)
    )


@torch.no_grad()
def embed_cube(s1: DataCube | None, s2: DataCube | None, checkpoint: Checkpoint,
               frames: list[int] | None = None, pixel_batch: int = 256) -> EmbeddingCube:
    """Dense embeddings for every valid center pixel and requested frame."""
    kind = KINDS[checkpoint.stage]
    source = s1 if kind == "s1" else s2
    if source is None:
        raise ValueError(f"embedding kind {kind!r} needs its source cube")
    t_total, h, w, _ = source.values.shape
    if h < PATCH_SIZE or w < PATCH_SIZE:
        raise ValueError(f"cube {h}x{w} is smaller than a {PATCH_SIZE}x{PATCH_SIZE} patch")
    if t_total < EMBED_FRAMES:
        raise ValueError(f"cube needs at least {EMBED_FRAMES} frames, has {t_total}")

    model = build_model(checkpoint)
    model.eval()
    frame_list = list(range(t_total)) if frames is None else sorted(frames)
    if any(f < 0 or f >= t_total for f in frame_list):
        raise ValueError("requested frame outside the cube timeline")

    if kind == "fused":
        match = dict(align_modalities(s1, s2))
        pv1, pm1 = _reflect_pad(s1)
    pv, pm = _reflect_pad(source)

    latent_dim = checkpoint.configs["fusion"]["fused_dim"] if kind == "fused" \
        else checkpoint.configs["modality"]["latent_dim"]
    e = np.full((t_total, h, w, latent_dim), np.nan, dtype=np.float32)

    for t in frame_list:
        window = _window_around(t, t_total)
        pos = window.index(t)
        patches = _patch_stack(pv, pm, window)
        times = source.times[window].astype(np.float32)
        if kind == "fused":
            s1_frames = [match[f] for f in window]
            patches_s1 = _patch_stack(pv1, pm1, s1_frames)
            times_s1 = s1.times[s1_frames].astype(np.float32)
        out_rows = []
        for start in range(0, patches.shape[0], pixel_batch):
            xb = torch.from_numpy(patches[start:start + pixel_batch])
            tb = torch.from_numpy(times).expand(xb.shape[0], -1)
            if kind == "fused":
                xb1 = torch.from_numpy(patches_s1[start:start + pixel_batch])
                tb1 = torch.from_numpy(times_s1).expand(xb.shape[0], -1)
                z = model.fuse_encode(xb1, tb1, xb, tb)
            else:
                z = model.encode(xb, tb)
            out_rows.append(z[:, pos, :].numpy())
        plane = np.concatenate(out_rows).reshape(h, w, latent_dim)
        valid_centers = source.mask[t]
        e[t] = np.where(valid_centers[..., None], plane, np.nan)

    return EmbeddingCube(
        e=e,
        times=source.times.copy(),
        cube_id=source.cube_id,
        kind=kind,
        model_hash=checkpoint.content_hash,
    )


# ---------------------------------------------------------------------------
# PCA over valid embedding vectors
# ---------------------------------------------------------------------------

@dataclass
class PCAProjection:
    components: np.ndarray  # [k, D] orthonormal rows, k <= 3
    mean: np.ndarray  # [D]
    explained_variance: np.ndarray  # [k], non-increasing
    total_variance: float
    reduced_rank: bool = False

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros_like(self.explained_variance)
        return self.explained_variance / self.total_variance

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) @ self.components.T

    def to_json(self) -> str:
        return json.dumps({
            "components": self.components.tolist(),
            "mean": self.mean.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "total_variance": self.total_variance,
            "reduced_rank": self.reduced_rank,
        }, sort_keys=True)


def fit_pca(e: EmbeddingCube, max_samples: int = 1_000_000, seed: int = 0) -> PCAProjection:
    """Top-3 principal directions of the valid embedding vectors.

    Signs are fixed so each component's largest-magnitude loading is
    positive; when the data (or the feature space) has rank below 3, the
    projection is flagged reduced_rank.
    """
    vectors = e.e[e.valid].astype(np.float64)
    if vectors.shape[0] < 3:
        raise ValueError(f"PCA needs >= 3 valid vectors, found {vectors.shape[0]}")
    if vectors.shape[0] > max_samples:
        rng = np.random.default_rng(seed)
        keep = rng.choice(vectors.shape[0], size=max_samples, replace=False)
        vectors = vectors[keep]

    mean = vectors.mean(axis=0)
    centered = vectors - mean
    cov = centered.T @ centered / (vectors.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]

    d = vectors.shape[1]
    k = min(3, d)
    comps = eigvecs[:, :k].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    ev = np.clip(eigvals[:k], 0.0, None)
    tol = 1e-12 * max(eigvals.max(), 1.0)
    effective_rank = int((eigvals > tol).sum())
    return PCAProjection(
        components=comps,
        mean=mean,
        explained_variance=ev,
        total_variance=float(np.clip(eigvals, 0.0, None).sum()),
        reduced_rank=effective_rank < 3 or d < 3,
    )


# ---------------------------------------------------------------------------
# Comparison rendering
# ---------------------------------------------------------------------------

def _stretch_percentile(plane: np.ndarray, valid: np.ndarray,
                        lo_pct: float = 2.0, hi_pct: float = 98.0) -> np.ndarray:
    out = np.zeros_like(plane, dtype=np.float64)
    for c in range(plane.shape[-1]):
        vals = plane[..., c][valid]
        if vals.size == 0:
            continue
        lo, hi = np.percentile(vals, [lo_pct, hi_pct])
        span = hi - lo
        if span <= 0:
            out[..., c][valid] = 0.5
        else:
            out[..., c] = np.clip((plane[..., c] - lo) / span, 0.0, 1.0)
    return np.where(valid[..., None], out, 0.0)


def _minmax_scale(plane: np.ndarray, valid: np.ndarray) -> np.ndarray:
    out = np.zeros_like(plane, dtype=np.float64)
    for c in range(plane.shape[-1]):
        vals = plane[..., c][valid]
        if vals.size == 0:
            continue
        lo, hi = vals.min(), vals.max()
        span = hi - lo
        if span <= 0:
            out[..., c][valid] = 0.0
        else:
            out[..., c] = np.clip((plane[..., c] - lo) / span, 0.0, 1.0)
    return np.where(valid[..., None], out, 0.0)


def _to_png(arr01: np.ndarray, path: Path) -> None:
    img = Image.fromarray((np.round(arr01 * 255.0)).astype(np.uint8), mode="RGB")
    img.save(path, format="PNG")


def render_comparison(e: EmbeddingCube, s2: DataCube, frame: int,
                      out: str | Path, pca: PCAProjection | None = None,
                      seed: int = 0) -> tuple[Path, Path]:
    """Write RGB and PCA-score PNGs for one frame; returns the two paths."""
    t, h, w, _ = e.e.shape
    if not 0 <= frame < t or frame >= s2.values.shape[0]:
        raise ValueError(f"frame {frame} missing from the inputs")
    e_valid = e.valid[frame]
    s2_valid = s2.mask[frame]
    if not e_valid.any() or not s2_valid.any():
        raise ValueError(f"frame {frame} has no valid pixels")

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    band_index = {b.name: b.index for b in s2.bands}
    rgb_raw = s2.values[frame][..., [band_index["B04"], band_index["B03"], band_index["B02"]]]
    rgb = _stretch_percentile(np.where(s2_valid[..., None], rgb_raw, 0.0), s2_valid)

    projection = pca or fit_pca(e, seed=seed)
    flat = np.where(e_valid[..., None], np.nan_to_num(e.e[frame]), 0.0)
    scores = projection.transform(flat.reshape(-1, e.e.shape[-1])).reshape(h, w, -1)
    if scores.shape[-1] < 3:
        pad = np.zeros((h, w, 3 - scores.shape[-1]))
        scores = np.concatenate([scores, pad], axis=-1)
    pca_img = _minmax_scale(scores, e_valid)

    rgb_path = out_dir / f"rgb_f{frame:03d}.png"
    pca_path = out_dir / f"pca_f{frame:03d}.png"
    _to_png(rgb, rgb_path)
    _to_png(pca_img, pca_path)
    return rgb_path, pca_path
