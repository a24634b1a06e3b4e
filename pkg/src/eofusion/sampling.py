"""Patch sampling, modality alignment, and leakage-safe cube splits.

Training samples are 15x15 spatial patches over 11 selected frames. Windows
are enumerated with per-modality strides, frames are randomly subselected
within each window, and Sentinel-1 frames are matched to the nearest
Sentinel-2 acquisition for fusion. Splits are assigned per cube so that no
location leaks across train/val/test.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datacube import DataCube

PATCH_SIZE = 15
PATCH_HALF = PATCH_SIZE // 2

TRAIN, VAL, TEST = "TRAIN", "VAL", "TEST"


@dataclass(frozen=True)
class SamplingScheme:
    """Window geometry: sequence length and strides for one modality."""

    sequence_length: int
    temporal_stride: int
    spatial_stride: int
    frames_selected: int = 11

    def __post_init__(self) -> None:
        if self.temporal_stride < 1 or self.spatial_stride < 1:
            raise ValueError("strides must be >= 1")
        if self.frames_selected > self.sequence_length:
            raise ValueError("cannot select more frames than the sequence holds")

    def to_dict(self) -> dict:
        return {
            "sequence_length": self.sequence_length,
            "temporal_stride": self.temporal_stride,
            "spatial_stride": self.spatial_stride,
            "frames_selected": self.frames_selected,
        }


# Radar has dense regular coverage; optical availability limits its windows.
S1_SCHEME = SamplingScheme(sequence_length=40, temporal_stride=40, spatial_stride=15)
S2_SCHEME = SamplingScheme(sequence_length=20, temporal_stride=17, spatial_stride=9)
FUSION_SCHEME = S2_SCHEME


@dataclass(frozen=True)
class EligibilityPolicy:
    """When a frame's 15x15 candidate patch may enter a sample.

    With min_patch_valid_fraction < 1, remaining invalid pixels are filled
    with the per-band patch mean at extraction time and the sample is
    flagged as filled.
    """

    min_patch_valid_fraction: float = 1.0
    require_center_valid: bool = True


@dataclass
class PatchSample:
    """One spatio-temporal training patch with its acquisition times."""

    values: np.ndarray  # [T_sel, 15, 15, C]
    times: np.ndarray  # [T_sel] days
    center: tuple[str, int, int]  # (cube_id, h, w)
    modality: str  # "S1" | "S2" | "FUSED"
    filled: bool = False

    @property
    def center_time_index(self) -> int:
        return self.values.shape[0] // 2

    def validate(self, strict_times: bool = True) -> None:
        t = self.values.shape[0]
        if self.values.shape[1:3] != (PATCH_SIZE, PATCH_SIZE):
            raise ValueError(f"patch spatial extent must be {PATCH_SIZE}x{PATCH_SIZE}")
        if self.times.shape != (t,):
            raise ValueError("times length must match the frame count")
        diffs = np.diff(self.times)
        if strict_times and np.any(diffs <= 0):
            raise ValueError("patch times must be strictly increasing")
        if not strict_times and np.any(diffs < 0):
            raise ValueError("patch times must be non-decreasing")


@dataclass
class FusedSample:
    """Time-aligned S1/S2 patch pair; nominal frame time is the S2 time."""

    s1: PatchSample
    s2: PatchSample

    @property
    def time_offsets(self) -> np.ndarray:
        return np.abs(self.s1.times - self.s2.times)

    def as_patch(self) -> PatchSample:
        values = np.concatenate([self.s1.values, self.s2.values], axis=-1)
        return PatchSample(
            values=values,
            times=self.s2.times.copy(),
            center=self.s2.center,
            modality="FUSED",
            filled=self.s1.filled or self.s2.filled,
        )


@dataclass(frozen=True)
class WindowIndex:
    """One enumerated sampling window, resolved to cube frame indices."""

    cube_id: str
    t0: int  # start position within this anchor's eligible-frame list
    frame_indices: tuple[int, ...]
    center: tuple[int, int]
    ordinal: int


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass
class SplitAssignment:
    assignment: dict[str, str]  # cube_id -> TRAIN | VAL | TEST

    def ids(self, split: str) -> list[str]:
        return sorted(k for k, v in self.assignment.items() if v == split)

    def split_of(self, cube_id: str) -> str:
        return self.assignment[cube_id]


def split_by_cube(cube_ids: list[str],
                  fractions: tuple[float, float, float] = (0.75, 0.17, 0.08),
                  seed: int = 0) -> SplitAssignment:
    """Assign whole cubes to splits: floor counts for VAL/TEST, rest to TRAIN."""
    if not cube_ids:
        raise ValueError("cannot split an empty cube list")
    if len(set(cube_ids)) != len(cube_ids):
        raise ValueError("cube ids must be unique")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")

    n = len(cube_ids)
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    n_test = int(math.floor(fractions[2] * n + 1e-9))
    n_train = n - n_val - n_test

    rng = np.random.default_rng(seed)
    order = list(rng.permutation(sorted(cube_ids)))
    assignment = {}
    for i, cube_id in enumerate(order):
        if i < n_train:
            assignment[cube_id] = TRAIN
        elif i < n_train + n_val:
            assignment[cube_id] = VAL
        else:
            assignment[cube_id] = TEST
    return SplitAssignment(assignment)


# ---------------------------------------------------------------------------
# Eligibility and window enumeration
# ---------------------------------------------------------------------------

def frame_eligibility(cube: DataCube, policy: EligibilityPolicy,
                      center: tuple[int, int] | None = None) -> np.ndarray:
    """Per-frame eligibility of the 15x15 patch around `center` (cube center
    when omitted)."""
    t, h, w, _ = cube.values.shape
    if h < PATCH_SIZE or w < PATCH_SIZE:
        raise ValueError(f"cube spatial extent {h}x{w} cannot hold a {PATCH_SIZE}x{PATCH_SIZE} patch")
    ch, cw = center if center is not None else (h // 2, w // 2)
    if not (PATCH_HALF <= ch <= h - PATCH_HALF - 1 and PATCH_HALF <= cw <= w - PATCH_HALF - 1):
        raise ValueError(f"patch around ({ch}, {cw}) does not fit the cube")
    sub = cube.mask[:, ch - PATCH_HALF:ch + PATCH_HALF + 1, cw - PATCH_HALF:cw + PATCH_HALF + 1]
    frac = sub.mean(axis=(1, 2))
    eligible = frac >= policy.min_patch_valid_fraction - 1e-12
    if policy.require_center_valid:
        eligible &= cube.mask[:, ch, cw]
    return eligible


def _spatial_anchors(extent: int, stride: int) -> list[int]:
    last = extent - PATCH_HALF - 1
    return list(range(PATCH_HALF, last + 1, stride))


def enumerate_windows(cube: DataCube, scheme: SamplingScheme,
                      policy: EligibilityPolicy | None = None) -> list[WindowIndex]:
    """Deterministic window enumeration: temporal-major, then row, then column."""
    policy = policy or EligibilityPolicy()
    _, h, w, _ = cube.values.shape
    if h < PATCH_SIZE or w < PATCH_SIZE:
        return []

    anchors = [(ah, aw) for ah in _spatial_anchors(h, scheme.spatial_stride)
               for aw in _spatial_anchors(w, scheme.spatial_stride)]
    eligible = {a: np.flatnonzero(frame_eligibility(cube, policy, a)) for a in anchors}

    windows: list[WindowIndex] = []
    n = 0
    while True:
        t0 = n * scheme.temporal_stride
        layer = []
        for a in anchors:
            idx = eligible[a]
            if t0 + scheme.sequence_length <= len(idx):
                frames = tuple(int(i) for i in idx[t0:t0 + scheme.sequence_length])
                layer.append(WindowIndex(cube.cube_id, t0, frames, a, ordinal=0))
        if not layer:
            break
        windows.extend(layer)
        n += 1
    return [
        WindowIndex(w_.cube_id, w_.t0, w_.frame_indices, w_.center, ordinal=i)
        for i, w_ in enumerate(windows)
    ]


def save_window_index(path: str | Path, windows: list[WindowIndex],
                      scheme: SamplingScheme) -> None:
    """Optional JSON-lines cache of enumerated windows."""
    with open(path, "w") as fh:
        for w in windows:
            rec = {"cube_id": w.cube_id, "t0": w.t0, "h": w.center[0],
                   "w": w.center[1], "scheme": scheme.to_dict()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Frame subselection and patch extraction
# ---------------------------------------------------------------------------

def _fill_patch_means(values: np.ndarray) -> tuple[np.ndarray, bool]:
    """Replace NaN pixels with the per-frame, per-band mean over valid pixels."""
    invalid = np.isnan(values)
    if not invalid.any():
        return values, False
    means = np.nanmean(values, axis=(1, 2), keepdims=True)
    return np.where(invalid, means, values), True


def _extract(cube: DataCube, frames: list[int], center: tuple[int, int],
             allow_fill: bool) -> PatchSample:
    ch, cw = center
    sl_h = slice(ch - PATCH_HALF, ch + PATCH_HALF + 1)
    sl_w = slice(cw - PATCH_HALF, cw + PATCH_HALF + 1)
    values = cube.values[frames, sl_h, sl_w, :].copy()
    filled = False
    if allow_fill:
        values, filled = _fill_patch_means(values)
    return PatchSample(
        values=values,
        times=cube.times[frames].copy(),
        center=(cube.cube_id, ch, cw),
        modality=cube.modality,
        filled=filled,
    )


def subselect_frames(cube: DataCube, window: WindowIndex, n: int = 11,
                     seed: int = 0,
                     policy: EligibilityPolicy | None = None) -> PatchSample:
    """Draw n distinct frames uniformly from the window, sorted ascending.

    Deterministic per (seed, window.ordinal), so parallel extraction is
    order-independent.
    """
    policy = policy or EligibilityPolicy()
    if n > len(window.frame_indices):
        raise ValueError(f"cannot select {n} frames from a window of {len(window.frame_indices)}")
    rng = np.random.default_rng([seed, window.ordinal])
    positions = np.sort(rng.choice(len(window.frame_indices), size=n, replace=False))
    frames = [window.frame_indices[p] for p in positions]
    sample = _extract(cube, frames, window.center,
                      allow_fill=policy.min_patch_valid_fraction < 1.0)
    sample.validate()
    return sample


# ---------------------------------------------------------------------------
# Modality alignment for fusion
# ---------------------------------------------------------------------------

def align_modalities(s1: DataCube, s2: DataCube) -> list[tuple[int, int]]:
    """Match each S2 frame to the nearest S1 frame; ties pick the earlier one."""
    if (s1.grid_origin != s2.grid_origin or s1.pixel_size != s2.pixel_size
            or s1.values.shape[1:3] != s2.values.shape[1:3]):
        raise ValueError("S1 and S2 cubes must cover the same grid")
    if len(s1.times) == 0 or len(s2.times) == 0:
        raise ValueError("both cubes need at least one frame")

    pairs = []
    t1 = s1.times
    for i2, t in enumerate(s2.times):
        j = int(np.searchsorted(t1, t))
        left, right = max(j - 1, 0), min(j, len(t1) - 1)
        if abs(t - t1[left]) <= abs(t1[right] - t):
            pairs.append((i2, left))
        else:
            pairs.append((i2, right))
    return pairs


def enumerate_fused_windows(s1: DataCube, s2: DataCube, scheme: SamplingScheme,
                            policy: EligibilityPolicy | None = None) -> list[WindowIndex]:
    """S2-timeline windows whose frames are patch-eligible in both modalities.

    frame_indices refer to the S2 cube; the matched S1 frame for each is
    recovered through align_modalities.
    """
    policy = policy or EligibilityPolicy()
    _, h, w, _ = s2.values.shape
    if h < PATCH_SIZE or w < PATCH_SIZE:
        return []
    match = dict(align_modalities(s1, s2))

    anchors = [(ah, aw) for ah in _spatial_anchors(h, scheme.spatial_stride)
               for aw in _spatial_anchors(w, scheme.spatial_stride)]
    eligible = {}
    for a in anchors:
        e2 = frame_eligibility(s2, policy, a)
        e1 = frame_eligibility(s1, policy, a)
        fused = np.array([e2[i2] and e1[match[i2]] for i2 in range(len(e2))])
        eligible[a] = np.flatnonzero(fused)

    windows: list[WindowIndex] = []
    n = 0
    while True:
        t0 = n * scheme.temporal_stride
        layer = []
        for a in anchors:
            idx = eligible[a]
            if t0 + scheme.sequence_length <= len(idx):
                frames = tuple(int(i) for i in idx[t0:t0 + scheme.sequence_length])
                layer.append(WindowIndex(s2.cube_id, t0, frames, a, ordinal=0))
        if not layer:
            break
        windows.extend(layer)
        n += 1
    return [
        WindowIndex(w_.cube_id, w_.t0, w_.frame_indices, w_.center, ordinal=i)
        for i, w_ in enumerate(windows)
    ]


def extract_fused_sample(s1: DataCube, s2: DataCube, window: WindowIndex,
                         n: int = 11, seed: int = 0,
                         policy: EligibilityPolicy | None = None) -> FusedSample:
    """Subselect frames on the S2 timeline and pair them with matched S1 frames."""
    policy = policy or EligibilityPolicy()
    if n > len(window.frame_indices):
        raise ValueError(f"cannot select {n} frames from a window of {len(window.frame_indices)}")
    rng = np.random.default_rng([seed, window.ordinal])
    positions = np.sort(rng.choice(len(window.frame_indices), size=n, replace=False))
    s2_frames = [window.frame_indices[p] for p in positions]
    match = dict(align_modalities(s1, s2))
    s1_frames = [match[f] for f in s2_frames]

    allow_fill = policy.min_patch_valid_fraction < 1.0
    s2_patch = _extract(s2, s2_frames, window.center, allow_fill)
    s1_patch = _extract(s1, s1_frames, window.center, allow_fill)
    s2_patch.validate()
    s1_patch.validate(strict_times=False)  # a dense S1 frame may serve two S2 dates
    return FusedSample(s1=s1_patch, s2=s2_patch)
