"""Joint radar-optical fusion network over frozen pretrained autoencoders.

Frozen modality encoders produce per-frame latents; modality-specific
linear projections are concatenated (together with the per-frame radar
to optical acquisition offset), mixed by a transformer positioned at the
optical acquisition times, and mapped into a compact fused bottleneck.
Linear back-projections feed the frozen decoders for reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from .autoencoder import ModalityAutoencoder, positional_encoding_irregular
from .errors import ConfigError, IntegrityError
from .sampling import FusedSample

FROZEN_PREFIXES = ("s1_ae.", "s2_ae.")


@dataclass(frozen=True)
class FusionConfig:
    fused_dim: int = 7
    projection_dim: int = 16
    transformer_layers: int = 2
    transformer_heads: int = 4
    dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.fused_dim < 1:
            raise ConfigError("fused_dim must be >= 1")
        if (2 * self.projection_dim) % self.transformer_heads != 0:
            raise ConfigError("transformer_heads must divide the fused model dimension")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FusionConfig":
        return cls(**d)


@dataclass
class FusedEmbedding:
    """Per-frame fused latent vectors at the optical acquisition times."""

    e: np.ndarray  # [T, fused_dim]
    times: np.ndarray  # [T], S2 days
    center: tuple[str, int, int] | None = None


class FusionModel(nn.Module):
    """Fusion layers on top of two frozen modality autoencoders."""

    def __init__(self, s1_ae: ModalityAutoencoder, s2_ae: ModalityAutoencoder,
                 config: FusionConfig):
        super().__init__()
        self.config = config
        self.s1_ae = s1_ae
        self.s2_ae = s2_ae
        for p in self.s1_ae.parameters():
            p.requires_grad_(False)
        for p in self.s2_ae.parameters():
            p.requires_grad_(False)

        d_model = 2 * config.projection_dim
        self.proj_s1 = nn.Linear(s1_ae.config.latent_dim, config.projection_dim)
        self.proj_s2 = nn.Linear(s2_ae.config.latent_dim, config.projection_dim)
        # +1 input feature: the |t_s1 - t_s2| acquisition offset of each token
        self.token_mix = nn.Linear(d_model + 1, d_model)
        layer = nn.TransformerEncoderLayer(
            d_model=d_model, nhead=config.transformer_heads,
            dim_feedforward=2 * d_model, dropout=config.dropout, batch_first=True,
        )
        self.temporal = nn.TransformerEncoder(layer, num_layers=config.transformer_layers)
        self.to_fused = nn.Linear(d_model, config.fused_dim)
        self.back_s1 = nn.Linear(config.fused_dim, s1_ae.config.latent_dim)
        self.back_s2 = nn.Linear(config.fused_dim, s2_ae.config.latent_dim)

    def train(self, mode: bool = True) -> "FusionModel":
        # the frozen backbones stay in eval mode so their features are stable
        super().train(mode)
        self.s1_ae.eval()
        self.s2_ae.eval()
        return self

    def fuse_encode(self, x_s1: Tensor, t_s1: Tensor, x_s2: Tensor,
                    t_s2: Tensor) -> Tensor:
        if x_s1.shape[1] != x_s2.shape[1]:
            raise ValueError(
                f"modalities disagree on frame count: {x_s1.shape[1]} vs {x_s2.shape[1]}"
            )
        z1 = self.s1_ae.encode(x_s1, t_s1)
        z2 = self.s2_ae.encode(x_s2, t_s2)
        offsets = (t_s1.to(z1.dtype) - t_s2.to(z1.dtype)).abs().unsqueeze(-1)
        tokens = self.token_mix(
            torch.cat([self.proj_s1(z1), self.proj_s2(z2), offsets], dim=-1)
        )
        tokens = tokens + positional_encoding_irregular(t_s2.to(tokens.dtype),
                                                        tokens.shape[-1])
        return self.to_fused(self.temporal(tokens))

    def fuse_decode(self, e: Tensor) -> tuple[Tensor, Tensor]:
        if e.shape[-1] != self.config.fused_dim:
            raise ConfigError(
                f"fused dim {e.shape[-1]} does not match config ({self.config.fused_dim})"
            )
        return self.s1_ae.decode(self.back_s1(e)), self.s2_ae.decode(self.back_s2(e))

    def forward(self, x_s1: Tensor, t_s1: Tensor, x_s2: Tensor,
                t_s2: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        e = self.fuse_encode(x_s1, t_s1, x_s2, t_s2)
        x_hat_s1, x_hat_s2 = self.fuse_decode(e)
        return e, x_hat_s1, x_hat_s2


def trainable_parameter_partition(model: FusionModel) -> tuple[set[str], set[str]]:
    """Exhaustive, disjoint split of parameter names into frozen and trainable."""
    frozen, trainable = set(), set()
    for name, p in model.named_parameters():
        backbone = name.startswith(FROZEN_PREFIXES)
        if backbone != (not p.requires_grad):
            raise IntegrityError(f"parameter {name} has an inconsistent freeze flag")
        (frozen if backbone else trainable).add(name)
    if frozen & trainable:
        raise IntegrityError("a parameter landed in both partitions")
    total = sum(1 for _ in model.named_parameters())
    if len(frozen) + len(trainable) != total:
        raise IntegrityError("freeze partition does not cover every parameter")
    return frozen, trainable


def _batch(samples: list[FusedSample]) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    x1 = torch.from_numpy(np.stack([s.s1.values for s in samples]).astype(np.float32))
    t1 = torch.from_numpy(np.stack([s.s1.times for s in samples]).astype(np.float32))
    x2 = torch.from_numpy(np.stack([s.s2.values for s in samples]).astype(np.float32))
    t2 = torch.from_numpy(np.stack([s.s2.times for s in samples]).astype(np.float32))
    return x1, t1, x2, t2


@torch.no_grad()
def fuse_encode_sample(model: FusionModel, sample: FusedSample) -> FusedEmbedding:
    """Deterministic evaluation-mode fused encoding of one aligned pair."""
    model.eval()
    x1, t1, x2, t2 = _batch([sample])
    e = model.fuse_encode(x1, t1, x2, t2)
    return FusedEmbedding(e=e[0].numpy(), times=sample.s2.times.copy(),
                          center=sample.s2.center)
