"""Context-aware reconstruction losses for patch autoencoding and fusion.

Pixel weights decay exponentially with spatio-temporal distance from the
patch center (w = alpha^d with d = max(|dh|, |dw|) + |dt| in index units),
optionally boosting the exact center. On top of the weighted MAE sit a
patch-global SSIM discrepancy, a spectral-angle term at the center pixel,
and the fixed-weight composites used for S2 pretraining and for fusion.

All losses accept a single patch [T, H, W, C] or a batch [B, T, H, W, C]
(batch mean is returned) plus an optional validity mask [.., T, H, W].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from .errors import DegenerateInputError

SSIM_C1 = (0.01 * 1.0) ** 2  # data range is 1 after normalization
SSIM_C2 = (0.03 * 1.0) ** 2
SAM_NORM_EPS = 1e-8
SAM_COS_MARGIN = 1e-7  # arccos gradient is singular at +-1

# Composite weights (MAE / SSIM / SAM for S2 pretraining; MAE / SAM for the
# fused S2 branch; SSIM / SAM for the joint term; S1 / S2 / joint overall).
S2_PRETRAIN_WEIGHTS = {"mae": 0.33, "ssim_loss": 0.02, "sam": 0.65}
FUSION_S2_WEIGHTS = {"mae": 0.85, "sam": 0.15}
FUSION_JOINT_WEIGHTS = {"ssim_loss": 0.1, "sam": 0.9}
FUSION_TOTAL_WEIGHTS = {"l_s1": 0.45, "l_s2": 0.45, "l_joint": 0.10}
FUSION_CENTER_BOOST_S1 = 1.5
FUSION_CENTER_BOOST_S2 = 1.75
DEFAULT_ALPHA = 0.1


# ---------------------------------------------------------------------------
# Context weights
# ---------------------------------------------------------------------------

@dataclass
class ContextWeights:
    """Exponential-decay loss weights over a [T, H, W] patch grid."""

    w: np.ndarray  # float64 [T, H, W], strictly positive
    alpha: float
    center_boost: float = 1.0

    def center_zeroed(self) -> np.ndarray:
        """Weights with the exact center removed (context-only metrics)."""
        t, h, w = self.w.shape
        out = self.w.copy()
        out[t // 2, h // 2, w // 2] = 0.0
        return out


def context_weights(t: int, h: int, w: int, alpha: float = DEFAULT_ALPHA,
                    center_boost: float = 1.0) -> ContextWeights:
    """Build w[dt, dh, dw] = alpha^(max(|dh|,|dw|) + |dt|), boosted center.

    alpha may be 1.0, which degrades to uniform weights (plain MAE).
    """
    for name, size in (("T", t), ("H", h), ("W", w)):
        if size < 1 or size % 2 == 0:
            raise ValueError(f"{name} must be odd so the center is defined, got {size}")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if center_boost < 1.0:
        raise ValueError(f"center boost must be >= 1, got {center_boost}")

    dt = np.abs(np.arange(t) - t // 2)
    dh = np.abs(np.arange(h) - h // 2)
    dw = np.abs(np.arange(w) - w // 2)
    d_spatial = np.maximum(dh[:, None], dw[None, :])
    d = dt[:, None, None] + d_spatial[None, :, :]
    # element-wise Python pow: numpy's integer-power shortcut rounds
    # differently, and these weights are pinned against enumeration oracles
    weights = np.empty((t, h, w), dtype=np.float64)
    flat = d.ravel()
    out = weights.ravel()
    for i in range(flat.size):
        out[i] = alpha ** int(flat[i])
    weights[t // 2, h // 2, w // 2] = center_boost
    return ContextWeights(w=weights, alpha=alpha, center_boost=center_boost)


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------

def _as_batch(x: Tensor, x_hat: Tensor,
              mask: Tensor | None) -> tuple[Tensor, Tensor, Tensor | None]:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if x.dim() == 4:
        x, x_hat = x.unsqueeze(0), x_hat.unsqueeze(0)
        if mask is not None:
            mask = mask.unsqueeze(0)
    elif x.dim() != 5:
        raise ValueError(f"expected [T,H,W,C] or [B,T,H,W,C], got {tuple(x.shape)}")
    if mask is not None and mask.shape != x.shape[:4]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match {tuple(x.shape[:4])}")
    return x, x_hat, mask


def _weight_tensor(w: ContextWeights | np.ndarray | Tensor, like: Tensor) -> Tensor:
    arr = w.w if isinstance(w, ContextWeights) else w
    return torch.as_tensor(np.asarray(arr) if not isinstance(arr, Tensor) else arr,
                           dtype=like.dtype, device=like.device)


# ---------------------------------------------------------------------------
# Core losses
# ---------------------------------------------------------------------------

def weighted_mae(x: Tensor, x_hat: Tensor, w: ContextWeights | np.ndarray | Tensor,
                 mask: Tensor | None = None) -> Tensor:
    """Eq-style weighted mean absolute error: sum(w |x_hat - x|) / sum(w).

    The per-pixel weight is shared by all channels; invalid pixels have
    their weight zeroed and the normalizer recomputed.
    """
    x, x_hat, mask = _as_batch(x, x_hat, mask)
    wt = _weight_tensor(w, x)[None, :, :, :, None]
    if mask is not None:
        wt = wt * mask[..., None].to(x.dtype)
    else:
        wt = wt.expand(x.shape[0], -1, -1, -1, 1)
    num = (wt * (x_hat - x).abs()).sum(dim=(1, 2, 3, 4))
    den = (wt * torch.ones_like(x)).sum(dim=(1, 2, 3, 4))
    if (den <= 0).any():
        raise DegenerateInputError("all loss weights vanished after masking")
    return (num / den).mean()


def ssim(x: Tensor, x_hat: Tensor, c1: float = SSIM_C1, c2: float = SSIM_C2,
         mask: Tensor | None = None) -> Tensor:
    """Structural similarity of two 2-D patches from patch-global statistics."""
    if x.dim() != 2 or x.shape != x_hat.shape:
        raise ValueError("ssim expects two 2-D arrays of identical shape")
    xf, yf = x.reshape(-1), x_hat.reshape(-1)
    if mask is not None:
        keep = mask.reshape(-1)
        xf, yf = xf[keep], yf[keep]
    if xf.numel() == 0:
        raise DegenerateInputError("no valid pixels for SSIM")
    mx, my = xf.mean(), yf.mean()
    vx = ((xf - mx) ** 2).mean()
    vy = ((yf - my) ** 2).mean()
    cov = ((xf - mx) * (yf - my)).mean()
    return ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))


def ssim_loss(x: Tensor, x_hat: Tensor, mask: Tensor | None = None,
              c1: float = SSIM_C1, c2: float = SSIM_C2) -> Tensor:
    """1 - SSIM averaged over every (timestep, band) slice with valid pixels."""
    x, x_hat, mask = _as_batch(x, x_hat, mask)
    b, t, h, w, c = x.shape
    xs = x.permute(0, 1, 4, 2, 3).reshape(b, t, c, h * w)
    ys = x_hat.permute(0, 1, 4, 2, 3).reshape(b, t, c, h * w)
    if mask is None:
        m = torch.ones(b, t, 1, h * w, dtype=x.dtype, device=x.device)
    else:
        m = mask.reshape(b, t, 1, h * w).to(x.dtype)
    n = m.sum(dim=-1)  # [B, T, 1]
    safe_n = n.clamp(min=1.0)
    mx = (xs * m).sum(-1) / safe_n
    my = (ys * m).sum(-1) / safe_n
    dx = (xs - mx.unsqueeze(-1)) * m
    dy = (ys - my.unsqueeze(-1)) * m
    vx = (dx * dx).sum(-1) / safe_n
    vy = (dy * dy).sum(-1) / safe_n
    cov = (dx * dy).sum(-1) / safe_n
    s = ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    valid_slice = (n > 0).expand(b, t, c)
    counts = valid_slice.sum(dim=(1, 2))
    if (counts == 0).any():
        raise DegenerateInputError("every (timestep, band) slice is fully invalid")
    loss = torch.where(valid_slice, 1.0 - s, torch.zeros_like(s))
    return (loss.sum(dim=(1, 2)) / counts).mean()


def sam(v: Tensor, v_hat: Tensor) -> Tensor:
    """Spectral angle (radians) between vectors laid out on the last axis."""
    if v.shape != v_hat.shape or v.shape[-1] < 2:
        raise ValueError("sam expects matching vectors with >= 2 components")
    nv = torch.linalg.vector_norm(v, dim=-1)
    nh = torch.linalg.vector_norm(v_hat, dim=-1)
    if (nv < 1e-12).any() or (nh < 1e-12).any():
        raise DegenerateInputError("zero-length spectral vector")
    cos = (v * v_hat).sum(-1) / ((nv + SAM_NORM_EPS) * (nh + SAM_NORM_EPS))
    cos = cos.clamp(-1.0 + SAM_COS_MARGIN, 1.0 - SAM_COS_MARGIN)
    return torch.arccos(cos)


def central_sam(x: Tensor, x_hat: Tensor, mask: Tensor | None = None) -> Tensor:
    """Mean spectral angle at the patch center across its valid frames."""
    x, x_hat, mask = _as_batch(x, x_hat, mask)
    _, t, h, w, c = x.shape
    if c < 2:
        raise ValueError("central SAM needs at least 2 channels")
    vc = x[:, :, h // 2, w // 2, :]
    vh = x_hat[:, :, h // 2, w // 2, :]
    angles = sam(vc, vh)  # [B, T]
    if mask is None:
        return angles.mean(dim=1).mean()
    valid = mask[:, :, h // 2, w // 2].to(x.dtype)
    counts = valid.sum(dim=1)
    if (counts == 0).any():
        raise DegenerateInputError("center pixel invalid at every frame")
    return ((angles * valid).sum(dim=1) / counts).mean()


def central_mae(x: Tensor, x_hat: Tensor, mask: Tensor | None = None) -> Tensor:
    """Unweighted MAE of the center pixel over valid frames and channels."""
    x, x_hat, mask = _as_batch(x, x_hat, mask)
    _, t, h, w, c = x.shape
    err = (x_hat - x).abs()[:, :, h // 2, w // 2, :]  # [B, T, C]
    if mask is None:
        return err.mean(dim=(1, 2)).mean()
    valid = mask[:, :, h // 2, w // 2].to(x.dtype)
    counts = valid.sum(dim=1)
    if (counts == 0).any():
        raise DegenerateInputError("center pixel invalid at every frame")
    return ((err * valid[..., None]).sum(dim=(1, 2)) / (counts * c)).mean()


# ---------------------------------------------------------------------------
# Composites
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    """Composite loss value plus the central/context diagnostics logged per step."""

    central_mae: Tensor
    central_sam: Tensor
    context_mae: Tensor
    context_ssim_loss: Tensor
    composite: Tensor
    components: dict[str, Tensor]
    component_weights: dict[str, float]
    extras: dict[str, Tensor] = field(default_factory=dict)

    def to_dict(self) -> dict[str, float]:
        def as_float(v) -> float:
            return float(v.detach()) if torch.is_tensor(v) else float(v)

        out = {
            "central_mae": as_float(self.central_mae),
            "central_sam": as_float(self.central_sam),
            "context_mae": as_float(self.context_mae),
            "context_ssim_loss": as_float(self.context_ssim_loss),
            "composite": as_float(self.composite),
        }
        for name, value in self.components.items():
            out[name] = as_float(value)
            out[f"weight_{name}"] = self.component_weights[name]
        for name, value in self.extras.items():
            out[name] = as_float(value)
        return out


def _composite(components: dict[str, Tensor], weights: dict[str, float]) -> Tensor:
    # float64 accumulation so logged composites decompose exactly into the
    # logged component values; gradients still flow to the float32 graph
    return sum(weights[k] * components[k].double() for k in weights)


def s1_pretrain_loss(x: Tensor, x_hat: Tensor, w: ContextWeights,
                     mask: Tensor | None = None) -> LossBreakdown:
    """Radar pretraining objective: the context-weighted MAE alone."""
    components = {"mae": weighted_mae(x, x_hat, w, mask)}
    weights = {"mae": 1.0}
    return LossBreakdown(
        central_mae=central_mae(x, x_hat, mask),
        central_sam=central_sam(x, x_hat, mask),
        context_mae=weighted_mae(x, x_hat, w.center_zeroed(), mask),
        context_ssim_loss=ssim_loss(x, x_hat, mask),
        composite=_composite(components, weights),
        components=components,
        component_weights=weights,
    )


def hybrid_s2_pretrain_loss(x: Tensor, x_hat: Tensor, w: ContextWeights,
                            mask: Tensor | None = None) -> LossBreakdown:
    """Optical pretraining objective: 0.33 MAE + 0.02 SSIM + 0.65 SAM."""
    components = {
        "mae": weighted_mae(x, x_hat, w, mask),
        "ssim_loss": ssim_loss(x, x_hat, mask),
        "sam": central_sam(x, x_hat, mask),
    }
    return LossBreakdown(
        central_mae=central_mae(x, x_hat, mask),
        central_sam=components["sam"],
        context_mae=weighted_mae(x, x_hat, w.center_zeroed(), mask),
        context_ssim_loss=components["ssim_loss"],
        composite=_composite(components, S2_PRETRAIN_WEIGHTS),
        components=components,
        component_weights=dict(S2_PRETRAIN_WEIGHTS),
    )


def fusion_losses(x_s1: Tensor, x_hat_s1: Tensor, x_s2: Tensor, x_hat_s2: Tensor,
                  mask_s1: Tensor | None = None, mask_s2: Tensor | None = None,
                  alpha: float = DEFAULT_ALPHA) -> LossBreakdown:
    """Fusion objective: 0.45 L_S1 + 0.45 L_S2 + 0.10 L_joint.

    L_S1 is the weighted MAE with the center boosted to 1.5; L_S2 combines
    weighted MAE (center boost 1.75) with the central spectral angle; the
    joint term scores the channel-concatenated 12-band pair with SSIM and
    SAM.
    """
    t1, h1, w1 = x_s1.shape[-4:-1]
    t2, h2, w2 = x_s2.shape[-4:-1]
    w_s1 = context_weights(t1, h1, w1, alpha, FUSION_CENTER_BOOST_S1)
    w_s2 = context_weights(t2, h2, w2, alpha, FUSION_CENTER_BOOST_S2)

    l_s1 = weighted_mae(x_s1, x_hat_s1, w_s1, mask_s1)
    s2_parts = {
        "mae": weighted_mae(x_s2, x_hat_s2, w_s2, mask_s2),
        "sam": central_sam(x_s2, x_hat_s2, mask_s2),
    }
    l_s2 = _composite(s2_parts, FUSION_S2_WEIGHTS)

    x_joint = torch.cat([x_s1, x_s2], dim=-1)
    x_hat_joint = torch.cat([x_hat_s1, x_hat_s2], dim=-1)
    mask_joint = None
    if mask_s1 is not None and mask_s2 is not None:
        mask_joint = mask_s1 & mask_s2
    joint_parts = {
        "ssim_loss": ssim_loss(x_joint, x_hat_joint, mask_joint),
        "sam": central_sam(x_joint, x_hat_joint, mask_joint),
    }
    l_joint = _composite(joint_parts, FUSION_JOINT_WEIGHTS)

    components = {"l_s1": l_s1, "l_s2": l_s2, "l_joint": l_joint}
    cm_s1 = central_mae(x_s1, x_hat_s1, mask_s1)
    cm_s2 = central_mae(x_s2, x_hat_s2, mask_s2)
    return LossBreakdown(
        central_mae=(cm_s1 + cm_s2) / 2,
        central_sam=joint_parts["sam"],
        context_mae=(weighted_mae(x_s1, x_hat_s1, w_s1.center_zeroed(), mask_s1)
                     + weighted_mae(x_s2, x_hat_s2, w_s2.center_zeroed(), mask_s2)) / 2,
        context_ssim_loss=joint_parts["ssim_loss"],
        composite=_composite(components, FUSION_TOTAL_WEIGHTS),
        components=components,
        component_weights=dict(FUSION_TOTAL_WEIGHTS),
        extras={
            "central_mae_s1": cm_s1,
            "central_mae_s2": cm_s2,
            "s2_mae": s2_parts["mae"],
            "s2_sam": s2_parts["sam"],
            "joint_ssim_loss": joint_parts["ssim_loss"],
            "joint_sam": joint_parts["sam"],
        },
    )
