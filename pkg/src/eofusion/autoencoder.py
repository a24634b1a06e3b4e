"""Per-modality convolutional-attention autoencoder over patch sequences.

The encoder runs three stride-2 conv blocks per frame (15 -> 8 -> 4 -> 2),
each gated by channel-then-spatial attention, with a multiscale module in
the first block; pooled frame features pass through a transformer whose
positional encoding is evaluated at the actual acquisition days, and a
linear head produces the per-frame latent (2 dims for radar, 9 for
optical). The decoder mirrors the spatial path back to 15x15 and squashes
outputs into [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from .errors import ConfigError, DataError
from .sampling import PatchSample

GATE_BIAS_INIT = 2.0  # sigmoid(2) ~ 0.88: start close to an identity gate


@dataclass(frozen=True)
class ModalityConfig:
    modality: str  # "S1" | "S2"
    in_channels: int
    latent_dim: int
    conv_channels: tuple[int, int, int] = (32, 64, 128)
    cbam_reduction: int = 8
    multiscale_kernels: tuple[int, ...] = (1, 3, 5)
    temporal_layers: int = 2
    temporal_heads: int = 4
    dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.modality not in ("S1", "S2"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        if list(self.conv_channels) != sorted(set(self.conv_channels)):
            raise ConfigError("conv_channels must be strictly increasing")
        if self.conv_channels[-1] % self.temporal_heads != 0:
            raise ConfigError("temporal_heads must divide the temporal model dimension")
        if any(k % 2 == 0 for k in self.multiscale_kernels):
            raise ConfigError("multiscale kernels must be odd")

    @classmethod
    def for_modality(cls, modality: str, **overrides) -> "ModalityConfig":
        defaults = {"S1": (2, 2), "S2": (10, 9)}
        if modality not in defaults:
            raise ConfigError(f"unknown modality {modality!r}")
        in_ch, latent = defaults[modality]
        return cls(modality=modality, in_channels=in_ch, latent_dim=latent, **overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        d["multiscale_kernels"] = list(self.multiscale_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModalityConfig":
        d = dict(d)
        d["conv_channels"] = tuple(d["conv_channels"])
        d["multiscale_kernels"] = tuple(d["multiscale_kernels"])
        return cls(**d)


@dataclass
class LatentSequence:
    """Per-frame latent vectors aligned to the sample's acquisition times."""

    z: np.ndarray  # [T, latent_dim]
    times: np.ndarray  # [T]


# ---------------------------------------------------------------------------
# Positional encoding over irregular acquisition days
# ---------------------------------------------------------------------------

def positional_encoding_irregular(times: Tensor, dim: int) -> Tensor:
    """Sinusoidal encoding at continuous day offsets from the first frame.

    times: [T] or [B, T]; equal timestamps yield equal rows, and shifting
    all times by a constant leaves the encoding unchanged.
    """
    if dim % 2 != 0:
        raise ValueError(f"encoding dim must be even, got {dim}")
    if not torch.is_tensor(times):
        times = torch.as_tensor(times, dtype=torch.float32)
    if (times[..., 1:] - times[..., :-1] < 0).any():
        raise ValueError("times must be non-decreasing")
    dt = (times - times[..., :1]).unsqueeze(-1)  # [.., T, 1]
    k = torch.arange(dim // 2, dtype=times.dtype, device=times.device)
    denom = torch.pow(torch.tensor(10000.0, dtype=times.dtype, device=times.device),
                      2.0 * k / dim)
    arg = dt / denom
    pe = torch.zeros(*times.shape, dim, dtype=times.dtype, device=times.device)
    pe[..., 0::2] = torch.sin(arg)
    pe[..., 1::2] = torch.cos(arg)
    return pe


# ---------------------------------------------------------------------------
# Attention blocks
# ---------------------------------------------------------------------------

class ChannelGate(nn.Module):
    """Shared two-layer bottleneck over avg- and max-pooled channel vectors."""

    def __init__(self, channels: int, reduction: int, identity_gates: bool = False):
        super().__init__()
        if channels < reduction:
            raise ConfigError(f"channel count {channels} below reduction {reduction}")
        self.mlp = nn.Sequential(
            nn.Linear(channels, channels // reduction),
            nn.ReLU(inplace=True),
            nn.Linear(channels // reduction, channels),
        )
        nn.init.constant_(self.mlp[-1].bias, GATE_BIAS_INIT)
        self.identity_gates = identity_gates

    def gate(self, x: Tensor) -> Tensor:
        if self.identity_gates:
            return torch.ones(x.shape[0], x.shape[1], 1, 1, dtype=x.dtype, device=x.device)
        avg = x.mean(dim=(2, 3))
        mx = x.amax(dim=(2, 3))
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))[:, :, None, None]

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class SpatialGate(nn.Module):
    """7x7 convolution over channel-mean and channel-max maps, sigmoid-gated."""

    def __init__(self, kernel: int = 7, identity_gates: bool = False):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel, padding=kernel // 2)
        nn.init.constant_(self.conv.bias, GATE_BIAS_INIT)
        self.identity_gates = identity_gates

    def gate(self, x: Tensor) -> Tensor:
        if self.identity_gates:
            return torch.ones(x.shape[0], 1, x.shape[2], x.shape[3],
                              dtype=x.dtype, device=x.device)
        stacked = torch.cat([x.mean(dim=1, keepdim=True),
                             x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(stacked))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class CBAM(nn.Module):
    """Channel-then-spatial multiplicative attention."""

    def __init__(self, channels: int, reduction: int = 8, identity_gates: bool = False):
        super().__init__()
        self.channel = ChannelGate(channels, reduction, identity_gates)
        self.spatial = SpatialGate(identity_gates=identity_gates)

    def forward(self, x: Tensor) -> Tensor:
        return self.spatial(self.channel(x))


class MultiscaleBlock(nn.Module):
    """Parallel odd-kernel convolutions fused by 1x1 conv + channel attention."""

    def __init__(self, in_channels: int, width: int,
                 kernels: tuple[int, ...] = (1, 3, 5), reduction: int = 8):
        super().__init__()
        if any(k % 2 == 0 for k in kernels):
            raise ConfigError(f"multiscale kernels must be odd, got {kernels}")
        self.paths = nn.ModuleList(
            nn.Conv2d(in_channels, width, k, padding=k // 2) for k in kernels
        )
        self.fuse = nn.Conv2d(width * len(kernels), width, 1)
        self.gate = ChannelGate(width, reduction)

    def forward(self, x: Tensor) -> Tensor:
        out = torch.cat([path(x) for path in self.paths], dim=1)
        return self.gate(self.fuse(out))


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


class EncoderBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, cfg: ModalityConfig,
                 with_multiscale: bool):
        super().__init__()
        self.down = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
        self.norm = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.act = nn.ReLU(inplace=True)
        self.multiscale = (
            MultiscaleBlock(out_ch, out_ch, cfg.multiscale_kernels, cfg.cbam_reduction)
            if with_multiscale else None
        )
        self.cbam = CBAM(out_ch, cfg.cbam_reduction)

    def forward(self, x: Tensor) -> Tensor:
        x = self.act(self.norm(self.down(x)))
        if self.multiscale is not None:
            x = self.multiscale(x)
        return self.cbam(x)


class DecoderBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, output_padding: int,
                 cfg: ModalityConfig, with_multiscale: bool):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, out_ch, 3, stride=2, padding=1,
                                     output_padding=output_padding)
        self.norm = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.act = nn.ReLU(inplace=True)
        self.multiscale = (
            MultiscaleBlock(out_ch, out_ch, cfg.multiscale_kernels, cfg.cbam_reduction)
            if with_multiscale else None
        )
        self.cbam = CBAM(out_ch, cfg.cbam_reduction)

    def forward(self, x: Tensor) -> Tensor:
        x = self.act(self.norm(self.up(x)))
        if self.multiscale is not None:
            x = self.multiscale(x)
        return self.cbam(x)


# ---------------------------------------------------------------------------
# The autoencoder
# ---------------------------------------------------------------------------

class ModalityAutoencoder(nn.Module):
    """Encoder-decoder over [B, T, 15, 15, C] patches with times [B, T]."""

    def __init__(self, config: ModalityConfig):
        super().__init__()
        self.config = config
        c1, c2, c3 = config.conv_channels
        self.enc_blocks = nn.ModuleList([
            EncoderBlock(config.in_channels, c1, config, with_multiscale=True),
            EncoderBlock(c1, c2, config, with_multiscale=False),
            EncoderBlock(c2, c3, config, with_multiscale=False),
        ])
        layer = nn.TransformerEncoderLayer(
            d_model=c3, nhead=config.temporal_heads, dim_feedforward=2 * c3,
            dropout=config.dropout, batch_first=True,
        )
        self.temporal = nn.TransformerEncoder(layer, num_layers=config.temporal_layers)
        self.to_latent = nn.Linear(c3, config.latent_dim)
        self.from_latent = nn.Linear(config.latent_dim, c3 * 2 * 2)
        self.dec_blocks = nn.ModuleList([
            DecoderBlock(c3, c2, 1, config, with_multiscale=False),  # 2 -> 4
            DecoderBlock(c2, c1, 1, config, with_multiscale=False),  # 4 -> 8
            DecoderBlock(c1, c1, 0, config, with_multiscale=True),   # 8 -> 15
        ])
        self.out_conv = nn.Conv2d(c1, config.in_channels, 3, padding=1)

    def _check_input(self, x: Tensor) -> None:
        if x.dim() != 5 or x.shape[-1] != self.config.in_channels:
            raise ConfigError(
                f"expected [B,T,15,15,{self.config.in_channels}], got {tuple(x.shape)}"
            )
        if not torch.isfinite(x).all():
            raise DataError("patch contains non-finite values")

    def encode(self, x: Tensor, times: Tensor) -> Tensor:
        self._check_input(x)
        b, t, h, w, c = x.shape
        frames = x.permute(0, 1, 4, 2, 3).reshape(b * t, c, h, w)
        for block in self.enc_blocks:
            frames = block(frames)
        feats = frames.mean(dim=(2, 3)).reshape(b, t, -1)
        pe = positional_encoding_irregular(times.to(feats.dtype), feats.shape[-1])
        tokens = self.temporal(feats + pe)
        return self.to_latent(tokens)

    def decode(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.config.latent_dim:
            raise ConfigError(
                f"latent dim {z.shape[-1]} does not match config ({self.config.latent_dim})"
            )
        b, t, _ = z.shape
        c3 = self.config.conv_channels[-1]
        maps = self.from_latent(z).reshape(b * t, c3, 2, 2)
        for block in self.dec_blocks:
            maps = block(maps)
        out = torch.sigmoid(self.out_conv(maps))
        _, c, h, w = out.shape
        return out.reshape(b, t, c, h, w).permute(0, 1, 3, 4, 2)

    def forward(self, x: Tensor, times: Tensor) -> tuple[Tensor, Tensor]:
        z = self.encode(x, times)
        return z, self.decode(z)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def _sample_tensors(sample: PatchSample) -> tuple[Tensor, Tensor]:
    x = torch.from_numpy(np.ascontiguousarray(sample.values, dtype=np.float32))
    t = torch.from_numpy(np.ascontiguousarray(sample.times, dtype=np.float32))
    return x.unsqueeze(0), t.unsqueeze(0)


@torch.no_grad()
def encode_sample(model: ModalityAutoencoder, sample: PatchSample) -> LatentSequence:
    """Deterministic evaluation-mode encoding of one patch sample."""
    model.eval()
    x, times = _sample_tensors(sample)
    z = model.encode(x, times)
    return LatentSequence(z=z[0].numpy(), times=sample.times.copy())


@torch.no_grad()
def decode_latent(model: ModalityAutoencoder, latent: LatentSequence) -> np.ndarray:
    """Reconstruct a [T, 15, 15, C] patch from a latent sequence."""
    model.eval()
    z = torch.from_numpy(np.ascontiguousarray(latent.z, dtype=np.float32)).unsqueeze(0)
    return model.decode(z)[0].numpy()
