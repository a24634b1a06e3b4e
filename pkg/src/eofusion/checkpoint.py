"""Versioned named-parameter checkpoints with freeze flags.

One file per checkpoint: a single-line JSON header carrying the stage,
configs, a parameter manifest of (name, shape, byte offset), freeze flags
and the payload's content hash, followed by the concatenated little-endian
float32 parameter arrays.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import FormatError, IntegrityError

CHECKPOINT_VERSION = 1

STAGE_PRETRAIN_S1 = "PRETRAIN_S1"
STAGE_PRETRAIN_S2 = "PRETRAIN_S2"
STAGE_FUSION = "FUSION"
STAGE_GPP = "GPP"
STAGES = (STAGE_PRETRAIN_S1, STAGE_PRETRAIN_S2, STAGE_FUSION, STAGE_GPP)


@dataclass
class Checkpoint:
    """In-memory parameter store; save/load round trips bit-exactly."""

    stage: str
    configs: dict
    params: dict[str, np.ndarray]  # float32 arrays, insertion-ordered
    frozen: set[str] = field(default_factory=set)
    refs: dict[str, str] = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self._payload()).hexdigest()

    def _payload(self) -> bytes:
        return b"".join(
            np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.params.values()
        )

    def save(self, path: str | Path) -> str:
        payload = self._payload()
        manifest, offset = [], 0
        for name, arr in self.params.items():
            manifest.append([name, list(arr.shape), offset])
            offset += arr.size * 4
        header = {
            "format_version": self.format_version,
            "stage": self.stage,
            "configs": self.configs,
            "params": manifest,
            "frozen": sorted(self.frozen),
            "refs": self.refs,
            "content_hash": hashlib.sha256(payload).hexdigest(),
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(payload)
        return header["content_hash"]

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        with open(path, "rb") as fh:
            header_line = fh.readline()
            payload = fh.read()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"corrupt checkpoint header in {path}: {exc}") from exc
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version in {path}")
        if header["stage"] not in STAGES:
            raise FormatError(f"unknown stage {header['stage']!r}")
        digest = hashlib.sha256(payload).hexdigest()
        if digest != header["content_hash"]:
            raise IntegrityError(
                f"checkpoint payload hash {digest[:12]} does not match header"
            )
        params: dict[str, np.ndarray] = {}
        for name, shape, offset in header["params"]:
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(payload, dtype="<f4", count=size, offset=offset)
            params[name] = arr.reshape(shape).copy()
        return cls(
            stage=header["stage"],
            configs=header["configs"],
            params=params,
            frozen=set(header["frozen"]),
            refs=dict(header.get("refs", {})),
        )

    @classmethod
    def from_model(cls, model: nn.Module, stage: str, configs: dict,
                   refs: dict[str, str] | None = None) -> "Checkpoint":
        params = {
            name: tensor.detach().cpu().numpy().astype(np.float32)
            for name, tensor in model.state_dict().items()
        }
        frozen = {name for name, p in model.named_parameters() if not p.requires_grad}
        return cls(stage=stage, configs=configs, params=params,
                   frozen=frozen, refs=dict(refs or {}))

    def load_into(self, model: nn.Module) -> None:
        state = {name: torch.from_numpy(arr.copy()) for name, arr in self.params.items()}
        model.load_state_dict(state, strict=True)


def build_model(ckpt: Checkpoint):
    """Reconstruct the model a checkpoint was taken from."""
    from .autoencoder import ModalityAutoencoder, ModalityConfig
    from .fusion import FusionConfig, FusionModel

    if ckpt.stage in (STAGE_PRETRAIN_S1, STAGE_PRETRAIN_S2):
        model = ModalityAutoencoder(ModalityConfig.from_dict(ckpt.configs["modality"]))
    else:
        s1 = ModalityAutoencoder(ModalityConfig.from_dict(ckpt.configs["s1"]))
        s2 = ModalityAutoencoder(ModalityConfig.from_dict(ckpt.configs["s2"]))
        model = FusionModel(s1, s2, FusionConfig.from_dict(ckpt.configs["fusion"]))
        natural_frozen = {n for n, p in model.named_parameters() if not p.requires_grad}
        if natural_frozen != ckpt.frozen:
            raise IntegrityError("checkpoint freeze flags disagree with the model layout")
    ckpt.load_into(model)
    model.eval()
    return model


def verify_fusion_refs(fusion_ckpt: Checkpoint, s1_ckpt: Checkpoint,
                       s2_ckpt: Checkpoint) -> None:
    """Check that a fusion checkpoint was assembled from these pretrained ones."""
    expected = {"s1": s1_ckpt.content_hash, "s2": s2_ckpt.content_hash}
    for key, want in expected.items():
        got = fusion_ckpt.refs.get(key)
        if got != want:
            raise IntegrityError(
                f"fusion checkpoint references {key} hash {str(got)[:12]}, "
                f"but the provided checkpoint has {want[:12]}"
            )
