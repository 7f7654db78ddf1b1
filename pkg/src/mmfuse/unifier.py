"""Modality unifier: confidence-weighted fusion of multi-modal token grids.

The processed fuser token is mapped by a small MLP + sigmoid to per-modality
confidence scores.  Fusion is a validity-weighted average of the modality
grids scaled by those confidences, normalized by the number of valid
modalities, plus the processed abstractor token:

    unified = sum_i(w_i * c_i * X_i) / sum_i(w_i) + abstractor

with w_i = 1 for a valid modality and 0 for a padded one, so absent
modalities have exactly zero influence.

The confidence MLP always has one output per member of the ``Modality``
enumeration, independent of the configured vocabulary; a model can therefore
grow from 1 to 5 modalities without touching any unifier weights.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn

from .types import (
    ConfigurationError,
    HybridSequence,
    Modality,
    ModalityConfidence,
    TokenGrid,
)

_ENUM_RANK = {m: i for i, m in enumerate(Modality)}


def unify(seq: HybridSequence, conf: ModalityConfidence) -> TokenGrid:
    """Collapse a hybrid sequence into one unified token grid (the fusion rule above)."""
    grids = seq.grids
    if not grids:
        raise ConfigurationError("cannot unify an empty grid list")
    shape = grids[0].grid_shape
    if any(g.grid_shape != shape for g in grids):
        raise ConfigurationError("grids must share a spatial shape to be fused")
    valid = [g for g in grids if g.valid]
    if not valid:
        raise ConfigurationError("no valid modality to fuse")
    total = None
    for g in valid:
        term = conf[g.modality] * g.tokens
        total = term if total is None else total + term
    fused = total / float(len(valid)) + seq.maa
    return TokenGrid(fused, shape, None, True)


class ModalityUnifier(nn.Module):
    """Per-stage confidence MLPs (dim -> dim -> |Modality| with GELU between)."""

    def __init__(self, stage_dims, vocabulary, use_maf: bool = True, use_maa: bool = True):
        super().__init__()
        self.vocabulary = tuple(vocabulary)
        self.use_maf = use_maf
        self.use_maa = use_maa
        self.confidence_mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, len(Modality)))
            for d in stage_dims
        )
        from .encoder import _init_module

        self.apply(_init_module)

    def confidence_batch(self, x_maf: torch.Tensor, stage_idx: int) -> torch.Tensor:
        """sigmoid(MLP(fuser feature)) at the vocabulary's enum slots, (B, |vocab|).

        With the fuser disabled (ablation), every confidence is exactly 1.
        """
        if not self.use_maf:
            return torch.ones(x_maf.shape[0], len(self.vocabulary), dtype=x_maf.dtype)
        logits = self.confidence_mlps[stage_idx](x_maf)
        slots = [_ENUM_RANK[m] for m in self.vocabulary]
        return torch.sigmoid(logits)[:, slots]

    def confidence(self, x_maf: torch.Tensor, stage_idx: int) -> ModalityConfidence:
        values = self.confidence_batch(x_maf.unsqueeze(0), stage_idx)[0]
        return ModalityConfidence(self.vocabulary, values)

    def confidence_view(self, values: torch.Tensor) -> ModalityConfidence:
        return ModalityConfidence(self.vocabulary, values)

    def unify_batch(
        self,
        grids: torch.Tensor,  # (B, m, N, D) in vocabulary order
        validity: torch.Tensor,  # (B, m) bool
        conf: torch.Tensor,  # (B, m)
        x_maa: torch.Tensor,  # (B, D)
    ) -> torch.Tensor:
        """Batched fusion rule; returns (B, N, D) unified tokens."""
        w = validity.to(grids.dtype)
        weights = (w * conf)[:, :, None, None]
        num = (weights * grids).sum(dim=1)
        den = w.sum(dim=1)[:, None, None]
        fused = num / den
        if self.use_maa:
            fused = fused + x_maa[:, None, :]
        return fused

    def unify(self, seq: HybridSequence, conf: ModalityConfidence) -> TokenGrid:
        if not self.use_maa:
            seq = HybridSequence(
                seq.maf, torch.zeros_like(seq.maa), seq.grids, seq.token_mask
            )
        return unify(seq, conf)


@dataclass
class UnifierParams:
    """Functional view of one stage's confidence MLP (used by oracle tests)."""

    w1: torch.Tensor
    b1: torch.Tensor
    w2: torch.Tensor
    b2: torch.Tensor

    @classmethod
    def from_module(cls, unifier: ModalityUnifier, stage_idx: int) -> "UnifierParams":
        mlp = unifier.confidence_mlps[stage_idx]
        return cls(mlp[0].weight, mlp[0].bias, mlp[2].weight, mlp[2].bias)
