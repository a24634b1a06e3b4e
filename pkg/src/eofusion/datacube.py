"""Spatio-temporal raster cubes for one satellite modality.

A cube holds a [T, H, W, C] value stack in [0, 1], acquisition times in
real-valued days, and a boolean validity mask. Missing observations carry
NaN in every channel; the mask is authoritative. The module also provides
preprocessing (masking, rolling mean, 0-1 normalization), a bit-exact
directory serialization, and a synthetic scene generator for desk-scale
experiments.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, IntegrityError

FORMAT_VERSION = 1
MISSING = np.nan

S1_BANDS = ("VV", "VH")
S2_BANDS = ("B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B11", "B12")


@dataclass(frozen=True)
class BandSpec:
    """One channel of a cube: name, modality, and position in the C axis."""

    name: str
    modality: str  # "S1" | "S2"
    index: int


def default_bands(modality: str) -> list[BandSpec]:
    names = S1_BANDS if modality == "S1" else S2_BANDS
    return [BandSpec(name, modality, i) for i, name in enumerate(names)]


def _check_bands(bands: list[BandSpec], modality: str) -> None:
    expected = 2 if modality == "S1" else 10
    if len(bands) != expected:
        raise DataError(f"{modality} cube needs {expected} bands, got {len(bands)}")
    if [b.index for b in bands] != list(range(len(bands))):
        raise DataError("band indices must be contiguous from 0 without duplicates")


@dataclass
class QualityRecord:
    """Per-frame validity summary used for frame-eligibility decisions."""

    frame_index: int
    valid_fraction: float
    center_valid: bool


@dataclass
class DataCube:
    """Masked, timestamped multiband raster stack for one modality.

    values: float32 [T, H, W, C], NaN where masked out.
    times: float64 [T], days since a cube-local epoch, strictly increasing.
    mask: bool [T, H, W], True = valid observation.
    """

    values: np.ndarray
    times: np.ndarray
    mask: np.ndarray
    bands: list[BandSpec]
    cube_id: str
    modality: str
    grid_origin: tuple[float, float] = (0.0, 0.0)
    pixel_size: float = 10.0

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.values.shape)

    def validate(self) -> None:
        """Check the normalized-cube invariants, raising DataError on violation."""
        t, h, w, c = self.values.shape
        if self.times.shape != (t,):
            raise DataError(f"times length {self.times.shape} does not match T={t}")
        if self.mask.shape != (t, h, w):
            raise DataError(f"mask shape {self.mask.shape} does not match {(t, h, w)}")
        if t > 1 and not np.all(np.diff(self.times) > 0):
            raise DataError("acquisition times must be strictly increasing")
        _check_bands(self.bands, self.modality)
        valid = self.values[self.mask]
        if valid.size and (not np.all(np.isfinite(valid))
                           or valid.min() < 0.0 or valid.max() > 1.0):
            raise DataError("valid pixels must be finite and in [0, 1]")
        invalid = self.values[~self.mask]
        if invalid.size and not np.all(np.isnan(invalid)):
            raise DataError("masked-out pixels must carry the NaN sentinel")

    def equals(self, other: "DataCube") -> bool:
        """Bit-exact equality of values, times, mask, bands, and metadata."""
        return (
            self.cube_id == other.cube_id
            and self.modality == other.modality
            and self.bands == other.bands
            and self.grid_origin == other.grid_origin
            and self.pixel_size == other.pixel_size
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
            and self.times.tobytes() == other.times.tobytes()
            and self.mask.tobytes() == other.mask.tobytes()
        )


def quality_records(cube: DataCube) -> list[QualityRecord]:
    t, h, w, _ = cube.values.shape
    ch, cw = h // 2, w // 2
    return [
        QualityRecord(i, float(cube.mask[i].mean()), bool(cube.mask[i, ch, cw]))
        for i in range(t)
    ]


# ---------------------------------------------------------------------------
# Directory serialization (bit-exact)
# ---------------------------------------------------------------------------

_MANIFEST_KEYS = {
    "format_version", "cube_id", "modality", "shape", "band_names",
    "pixel_size_m", "grid_origin", "dtype", "files",
}


def save_cube(cube: DataCube, path: str | Path) -> None:
    """Write manifest.json plus raw little-endian arrays; deterministic bytes."""
    cube.validate()
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "cube_id": cube.cube_id,
        "modality": cube.modality,
        "shape": list(cube.values.shape),
        "band_names": [b.name for b in cube.bands],
        "pixel_size_m": cube.pixel_size,
        "grid_origin": list(cube.grid_origin),
        "dtype": "f32le",
        "files": {"values": "values.bin", "times": "times.bin", "mask": "mask.bin"},
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    )
    (out / "values.bin").write_bytes(
        np.ascontiguousarray(cube.values, dtype="<f4").tobytes()
    )
    (out / "times.bin").write_bytes(
        np.ascontiguousarray(cube.times, dtype="<f8").tobytes()
    )
    (out / "mask.bin").write_bytes(
        np.ascontiguousarray(cube.mask, dtype=np.uint8).tobytes()
    )


def load_cube(path: str | Path) -> DataCube:
    """Load a cube directory written by save_cube; round trips bit-exactly."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise FormatError(f"missing manifest.json in {root}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest in {root}: {exc}") from exc
    missing = _MANIFEST_KEYS - manifest.keys()
    if missing:
        raise FormatError(f"manifest missing fields {sorted(missing)}")
    if manifest["dtype"] != "f32le":
        raise FormatError(f"unsupported dtype {manifest['dtype']!r}")

    t, h, w, c = manifest["shape"]
    files = manifest["files"]
    values = np.frombuffer((root / files["values"]).read_bytes(), dtype="<f4")
    times = np.frombuffer((root / files["times"]).read_bytes(), dtype="<f8")
    mask = np.frombuffer((root / files["mask"]).read_bytes(), dtype=np.uint8)
    if values.size != t * h * w * c:
        raise IntegrityError(
            f"values.bin holds {values.size} floats, manifest declares {t * h * w * c}"
        )
    if times.size != t:
        raise IntegrityError(f"times.bin holds {times.size} entries, manifest declares {t}")
    if mask.size != t * h * w:
        raise IntegrityError(f"mask.bin holds {mask.size} bytes, manifest declares {t * h * w}")

    modality = manifest["modality"]
    bands = [BandSpec(name, modality, i) for i, name in enumerate(manifest["band_names"])]
    cube = DataCube(
        values=values.reshape(t, h, w, c).copy(),
        times=times.copy(),
        mask=mask.reshape(t, h, w).astype(bool),
        bands=bands,
        cube_id=manifest["cube_id"],
        modality=modality,
        grid_origin=tuple(manifest["grid_origin"]),
        pixel_size=manifest["pixel_size_m"],
    )
    cube.validate()
    return cube


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def rolling_mean_s1(cube: DataCube, window: int = 3) -> DataCube:
    """Temporal rolling mean over valid frames, truncated at the series edges.

    A pixel in the output is valid when at least one frame in its window
    contributed; per-pixel means use valid entries only.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    if cube.modality != "S1":
        raise DataError("rolling mean applies to the S1 (radar) modality only")
    if window == 1:
        return replace(cube, values=cube.values.copy(), mask=cube.mask.copy())

    t = cube.values.shape[0]
    half = window // 2
    filled = np.where(cube.mask[..., None], cube.values.astype(np.float64), 0.0)
    counts = cube.mask.astype(np.int64)
    window_sum = np.zeros_like(filled)
    window_count = np.zeros((t, *cube.mask.shape[1:]), dtype=np.int64)
    for offset in range(-half, half + 1):
        src = slice(max(offset, 0), t + min(offset, 0))
        dst = slice(max(-offset, 0), t + min(-offset, 0))
        window_sum[dst] += filled[src]
        window_count[dst] += counts[src]

    out_mask = window_count > 0
    out = np.full(cube.values.shape, MISSING)
    np.divide(window_sum, window_count[..., None], out=out, where=window_count[..., None] > 0)
    return replace(cube, values=out.astype(np.float32), mask=out_mask)


@dataclass(frozen=True)
class NormalizationPolicy:
    """Scaling applied by normalize_01. The identity policy only clips."""

    s2_scale: float = 1e-4  # integer reflectance -> reflectance
    s1_clip_ceiling: float = 1.0  # linear backscatter values above this clip to 1

    @classmethod
    def identity(cls) -> "NormalizationPolicy":
        return cls(s2_scale=1.0, s1_clip_ceiling=1.0)


def normalize_01(cube: DataCube, policy: NormalizationPolicy | None = None) -> DataCube:
    """Map raw values onto [0, 1]: S2 reflectance scaling, S1 ceiling clip."""
    policy = policy or NormalizationPolicy()
    vals = cube.values.astype(np.float64)
    if cube.modality == "S2":
        scaled = vals * policy.s2_scale
        finite = np.isfinite(scaled)
        if np.any(scaled[finite] < -1e-6):
            raise DataError("negative S2 reflectance beyond tolerance")
        out = np.clip(scaled, 0.0, 1.0)
    else:
        out = np.clip(vals / policy.s1_clip_ceiling, 0.0, 1.0)
    out = np.where(cube.mask[..., None], out, MISSING)
    return replace(cube, values=out.astype(np.float32))


def apply_mask(cube: DataCube, mask: np.ndarray) -> DataCube:
    """AND an extra validity mask into the cube, NaN-ing newly invalid pixels."""
    if mask.shape != cube.mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match cube {cube.mask.shape}")
    combined = cube.mask & mask.astype(bool)
    values = np.where(combined[..., None], cube.values, MISSING).astype(np.float32)
    return replace(cube, values=values, mask=combined)


# ---------------------------------------------------------------------------
# Synthetic scene generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Desk-scale stand-in for a real multi-class acquisition campaign.

    Scenes drawn with different seeds share one "world": the per-class,
    per-band seasonal signals derive from world_seed, while the class map,
    acquisition timeline, noise, and cloud masks vary per scene seed. Set
    world_seed to None to give every scene independent signals.
    """

    height: int = 30
    width: int = 30
    classes: int = 2
    s2_frames: int = 60
    s1_frames: int = 100
    noise: float = 0.0
    amp_range: tuple[float, float] = (0.05, 0.2)
    cloud_fraction: float = 0.0
    cube_id_prefix: str = "synth"
    world_seed: int | None = 7


@dataclass
class SynthScene:
    s1: DataCube
    s2: DataCube
    class_map: np.ndarray  # [H, W] int labels in [0, K)


def _voronoi_class_map(rng: np.random.Generator, h: int, w: int, k: int) -> np.ndarray:
    centers = rng.choice(h * w, size=k, replace=False)
    cy, cx = np.divmod(centers, w)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    d2 = (yy[..., None] - cy) ** 2 + (xx[..., None] - cx) ** 2
    return np.argmin(d2, axis=-1).astype(np.int64)


def _signal_params(rng: np.random.Generator, k: int, n_bands: int,
                   amp_range: tuple[float, float]) -> tuple[np.ndarray, ...]:
    base = rng.uniform(0.25, 0.75, size=(k, 1, n_bands))
    amp = rng.uniform(amp_range[0], amp_range[1], size=(k, 1, n_bands))
    phase = rng.uniform(0.0, 365.0, size=(k, 1, n_bands))
    return base, amp, phase


def _seasonal_signal(params: tuple[np.ndarray, ...], times: np.ndarray) -> np.ndarray:
    """Per-class, per-band sinusoid with a 365-day period; shape [K, T, C]."""
    base, amp, phase = params
    t = times[None, :, None]
    return base + amp * np.sin(2.0 * np.pi * (t + phase) / 365.0)


def _cloud_mask(rng: np.random.Generator, t: int, h: int, w: int,
                fraction: float) -> np.ndarray:
    """True = valid. Drops roughly `fraction` of each frame in round blobs."""
    mask = np.ones((t, h, w), dtype=bool)
    if fraction <= 0.0:
        return mask
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    max_r = max(3.0, min(h, w) / 4.0)
    for i in range(t):
        covered = np.zeros((h, w), dtype=bool)
        for _ in range(10 * math.ceil(fraction * 10) + 10):
            if covered.mean() >= fraction:
                break
            cy, cx = rng.integers(0, h), rng.integers(0, w)
            r = rng.uniform(2.0, max_r)
            covered |= (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        mask[i] = ~covered
    return mask


def generate_synthetic_scene(spec: SynthSpec, seed: int) -> SynthScene:
    """Deterministically generate one aligned S1/S2 scene plus its class map."""
    if spec.classes < 2:
        raise ValueError(f"need at least 2 land-cover classes, got {spec.classes}")
    if not 0.0 <= spec.cloud_fraction < 1.0:
        raise ValueError(f"cloud fraction must lie in [0, 1), got {spec.cloud_fraction}")
    if spec.s1_frames < spec.s2_frames:
        raise ValueError("the S1 timeline must be at least as long as the S2 timeline")

    rng = np.random.default_rng(seed)
    world_rng = rng if spec.world_seed is None else np.random.default_rng(spec.world_seed)
    h, w, k = spec.height, spec.width, spec.classes
    class_map = _voronoi_class_map(rng, h, w, k)

    # Regular ~6-day radar revisit vs irregular 5-15 day cloud-free optical gaps.
    times_s1 = 3.0 + 6.0 * np.arange(spec.s1_frames, dtype=np.float64)
    gaps = rng.uniform(5.0, 15.0, size=spec.s2_frames - 1)
    times_s2 = np.concatenate([[rng.uniform(0.0, 5.0)], gaps]).cumsum()

    cubes = {}
    for modality, times in (("S1", times_s1), ("S2", times_s2)):
        n_bands = 2 if modality == "S1" else 10
        params = _signal_params(world_rng, k, n_bands, spec.amp_range)
        signal = _seasonal_signal(params, times)
        values = signal[class_map]  # [H, W, T, C]
        values = np.moveaxis(values, 2, 0)  # [T, H, W, C]
        noise = rng.normal(0.0, spec.noise, size=values.shape)
        values = np.clip(values + noise, 0.0, 1.0)
        if modality == "S2":
            mask = _cloud_mask(rng, len(times), h, w, spec.cloud_fraction)
        else:
            mask = np.ones((len(times), h, w), dtype=bool)
        values = np.where(mask[..., None], values, MISSING).astype(np.float32)
        cubes[modality] = DataCube(
            values=values,
            times=times.copy(),
            mask=mask,
            bands=default_bands(modality),
            cube_id=f"{spec.cube_id_prefix}-{seed:05d}-{modality.lower()}",
            modality=modality,
        )
        cubes[modality].validate()
    return SynthScene(s1=cubes["S1"], s2=cubes["S2"], class_map=class_map)


def generate_synthetic_cube(spec: SynthSpec, seed: int) -> tuple[DataCube, DataCube]:
    """Generate the (S1, S2) cube pair for one synthetic location."""
    scene = generate_synthetic_scene(spec, seed)
    return scene.s1, scene.s2
