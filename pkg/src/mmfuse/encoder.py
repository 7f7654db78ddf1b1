"""Unified multi-modal transformer encoder.

Four hierarchical stages.  Each stage embeds every modality's input through
its own patch-embedding layer, prepends two learnable tokens (a fuser token
whose processed feature drives per-modality confidence, and an abstractor
token whose feature is added to the fused output), runs masked pre-norm
transformer blocks over the hybrid sequence, and hands the sequence to the
modality unifier.  The unified grid is both a pyramid output and the next
stage's input.

Invalid modalities participate only as fully-masked placeholder tokens:
excluded as attention keys, zeroed after every block, and weighted zero in
fusion, so their values can never influence a valid position.

Tensors carry a leading batch dimension internally; the single-sample
operations are thin B=1 views over the same code path, so samples of equal
resolution can share one graph during training.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .dropout import pad_missing_modality
from .types import (
    DEFAULT_CHANNELS,
    ConfigurationError,
    HybridSequence,
    Modality,
    MultiModalSample,
    TokenGrid,
    canonical_modality_order,
)


@dataclass(frozen=True)
class StageConfig:
    patch_stride: int  # cumulative downsampling factor at this stage
    embed_dim: int
    depth: int
    num_heads: int
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.patch_stride < 1 or self.depth < 0:
            raise ConfigurationError("invalid stage geometry")


@dataclass
class EncoderConfig:
    stages: tuple[StageConfig, ...] = (
        StageConfig(4, 16, 1, 2),
        StageConfig(8, 32, 1, 4),
        StageConfig(16, 64, 1, 4),
        StageConfig(32, 128, 1, 8),
    )
    vocabulary: tuple[Modality, ...] = (Modality.RGB, Modality.IR)
    channels: dict[Modality, int] = field(default_factory=lambda: dict(DEFAULT_CHANNELS))
    max_input_hw: int = 64  # sizes the learned positional tables

    def __post_init__(self):
        self.stages = tuple(self.stages)
        if len(self.stages) != 4:
            raise ConfigurationError("encoder requires exactly 4 stages")
        strides = [s.patch_stride for s in self.stages]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ConfigurationError("cumulative strides must be strictly increasing")
        if any(b % a for a, b in zip(strides, strides[1:])):
            raise ConfigurationError("each stage stride must divide the next")
        dims = [s.embed_dim for s in self.stages]
        if any(b < a for a, b in zip(dims, dims[1:])):
            raise ConfigurationError("embedding dims must be non-decreasing")
        self.vocabulary = tuple(canonical_modality_order(self.vocabulary))
        self.channels = {m: int(self.channels.get(m, DEFAULT_CHANNELS[m])) for m in self.vocabulary}
        if any(c < 1 for c in self.channels.values()):
            raise ConfigurationError("channel counts must be positive")
        if self.max_input_hw % self.stages[-1].patch_stride:
            raise ConfigurationError("max_input_hw must be a multiple of the final stride")

    def local_stride(self, stage_idx: int) -> int:
        if stage_idx == 0:
            return self.stages[0].patch_stride
        return self.stages[stage_idx].patch_stride // self.stages[stage_idx - 1].patch_stride

    def to_dict(self) -> dict:
        return {
            "stages": [
                {
                    "patch_stride": s.patch_stride,
                    "embed_dim": s.embed_dim,
                    "depth": s.depth,
                    "num_heads": s.num_heads,
                    "mlp_ratio": s.mlp_ratio,
                }
                for s in self.stages
            ],
            "vocabulary": [m.name for m in self.vocabulary],
            "channels": {m.name: c for m, c in self.channels.items()},
            "max_input_hw": self.max_input_hw,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(
            stages=tuple(StageConfig(**s) for s in d["stages"]),
            vocabulary=tuple(Modality[m] for m in d["vocabulary"]),
            channels={Modality[m]: c for m, c in d["channels"].items()},
            max_input_hw=d["max_input_hw"],
        )


def pad_plane_to_multiple(plane: np.ndarray, multiple: int) -> np.ndarray:
    """Zero-pad bottom/right so H and W are multiples of ``multiple``."""
    h, w = plane.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return plane
    return np.pad(plane, ((0, ph), (0, pw), (0, 0)))


class MaskedSelfAttention(nn.Module):
    """Multi-head self-attention over (B, L, D) with a (B, L) key-validity mask."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor) -> torch.Tensor:
        B, L, D = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]  # (B, heads, L, head_dim)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, L, D)
        return self.proj(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MaskedSelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), key_valid)
        x = x + self.mlp(self.norm2(x))
        return x


class PatchEmbed(nn.Module):
    """Non-overlapping patch projection (conv with kernel = stride)."""

    def __init__(self, in_channels: int, embed_dim: int, stride: int):
        super().__init__()
        self.stride = stride
        self.proj = nn.Conv2d(in_channels, embed_dim, kernel_size=stride, stride=stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C, H, W) -> tokens (B, N, D) in row-major grid order
        if x.shape[2] % self.stride or x.shape[3] % self.stride:
            raise ConfigurationError(
                f"input {tuple(x.shape[2:])} not divisible by stride {self.stride}"
            )
        return self.proj(x).flatten(2).transpose(1, 2)


def _init_module(m: nn.Module) -> None:
    if isinstance(m, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class MultiModalEncoder(nn.Module):
    """Shared-branch encoder: only patch embeddings are per-modality."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        dims = [s.embed_dim for s in cfg.stages]
        self.patch_embeds = nn.ModuleDict()
        for m in cfg.vocabulary:
            per_stage = []
            for k, stage in enumerate(cfg.stages):
                in_ch = cfg.channels[m] if k == 0 else dims[k - 1]
                per_stage.append(PatchEmbed(in_ch, stage.embed_dim, cfg.local_stride(k)))
            self.patch_embeds[m.name] = nn.ModuleList(per_stage)
        self.blocks = nn.ModuleList(
            nn.ModuleList(
                TransformerBlock(s.embed_dim, s.num_heads, s.mlp_ratio) for _ in range(s.depth)
            )
            for s in cfg.stages
        )
        self.maf_tokens = nn.ParameterList(
            nn.Parameter(torch.zeros(s.embed_dim)) for s in cfg.stages
        )
        self.maa_tokens = nn.ParameterList(
            nn.Parameter(torch.zeros(s.embed_dim)) for s in cfg.stages
        )
        self.pos_tables = nn.ParameterList(
            nn.Parameter(
                torch.zeros(
                    s.embed_dim,
                    cfg.max_input_hw // s.patch_stride,
                    cfg.max_input_hw // s.patch_stride,
                )
            )
            for s in cfg.stages
        )
        self.apply(_init_module)
        for p in list(self.maf_tokens) + list(self.maa_tokens) + list(self.pos_tables):
            nn.init.trunc_normal_(p, std=0.02)

    @property
    def dtype(self) -> torch.dtype:
        return self.maf_tokens[0].dtype

    # -- batched core ------------------------------------------------------

    def _embed(self, x: torch.Tensor, modality: Modality, stage_idx: int):
        """(B, C, H, W) -> tokens (B, N, D) with positional embedding added."""
        if modality.name not in self.patch_embeds:
            raise ConfigurationError(f"modality {modality.name} not in encoder vocabulary")
        tokens = self.patch_embeds[modality.name][stage_idx](x)
        stride = self.cfg.local_stride(stage_idx)
        h, w = x.shape[2] // stride, x.shape[3] // stride
        table = self.pos_tables[stage_idx]
        if h > table.shape[1] or w > table.shape[2]:
            raise ConfigurationError(
                f"grid ({h}, {w}) exceeds positional table {tuple(table.shape[1:])}; "
                "raise max_input_hw"
            )
        pos = table[:, :h, :w].flatten(1).transpose(0, 1)
        return tokens + pos, (h, w)

    def _run_blocks(self, x: torch.Tensor, mask: torch.Tensor, stage_idx: int) -> torch.Tensor:
        """(B, L, D) through the stage's blocks; masked positions are never
        attention keys and their outputs are zeroed after every block."""
        for block in self.blocks[stage_idx]:
            x = block(x, mask)
            x = torch.where(mask[:, :, None], x, torch.zeros((), dtype=x.dtype))
        return x

    def encode_core(self, samples: list[MultiModalSample], unifier):
        """Encode same-resolution samples in one batched pass.

        Returns (levels, grid_shapes, stage_records): per-stage unified token
        tensors (B, N, D), their grid shapes, and per-stage dicts holding the
        batched processed fuser/abstractor features and confidences.
        """
        cfg = self.cfg
        order = list(cfg.vocabulary)
        multiple = cfg.stages[-1].patch_stride
        dtype = self.dtype
        samples = [pad_missing_modality(s, cfg.vocabulary, cfg.channels) for s in samples]
        planes: dict[Modality, torch.Tensor] = {}
        for m in order:
            stack = np.stack(
                [pad_plane_to_multiple(s.planes[m], multiple) for s in samples]
            )
            planes[m] = torch.from_numpy(np.ascontiguousarray(stack)).to(dtype).permute(0, 3, 1, 2)
        shapes = {planes[m].shape[2:] for m in order}
        if len(shapes) != 1:
            raise ConfigurationError("batched samples must share a padded resolution")
        validity = torch.tensor(
            [[bool(s.valid[m]) for m in order] for s in samples], dtype=torch.bool
        )  # (B, m)
        B = len(samples)

        levels: list[torch.Tensor] = []
        grid_shapes: list[tuple[int, int]] = []
        stage_records: list[dict] = []
        stage_tokens = None  # (B, N, D) unified tokens of the previous stage
        grid_shape = None
        for k in range(len(cfg.stages)):
            per_modality = []
            prev_shape = grid_shape
            for m in order:
                if k == 0:
                    x = planes[m]
                else:
                    h, w = prev_shape
                    x = stage_tokens.transpose(1, 2).reshape(B, -1, h, w)
                tokens, grid_shape = self._embed(x, m, k)
                per_modality.append(tokens)
            n = grid_shape[0] * grid_shape[1]
            maf = self.maf_tokens[k].expand(B, 1, -1)
            maa = self.maa_tokens[k].expand(B, 1, -1)
            seq = torch.cat([maf, maa] + per_modality, dim=1)
            mask = torch.cat(
                [
                    torch.ones(B, 2, dtype=torch.bool),
                    validity.repeat_interleave(n, dim=1),
                ],
                dim=1,
            )
            seq = self._run_blocks(seq, mask, k)
            x_maf, x_maa = seq[:, 0], seq[:, 1]
            grids = seq[:, 2:].reshape(B, len(order), n, -1)
            conf = unifier.confidence_batch(x_maf, k)  # (B, |vocab|)
            unified = unifier.unify_batch(grids, validity, conf, x_maa)
            levels.append(unified)
            grid_shapes.append(grid_shape)
            stage_records.append({"maf": x_maf, "maa": x_maa, "confidence": conf})
            stage_tokens = unified
        return levels, grid_shapes, stage_records

    def encode_batch(self, samples: list[MultiModalSample], unifier, return_stage_records=False):
        """Per-sample unified pyramids (lists of TokenGrid) for a batch."""
        levels, grid_shapes, stage_records = self.encode_core(samples, unifier)
        B = len(samples)
        pyramids = [
            [TokenGrid(levels[k][b], grid_shapes[k], None, True) for k in range(len(levels))]
            for b in range(B)
        ]
        if not return_stage_records:
            return pyramids
        records = [
            [
                {
                    "maf": rec["maf"][b],
                    "maa": rec["maa"][b],
                    "confidence": unifier.confidence_view(rec["confidence"][b]),
                }
                for rec in stage_records
            ]
            for b in range(B)
        ]
        return pyramids, records

    # -- single-sample views of the same core --------------------------------

    def patch_embed(self, x: torch.Tensor, modality: Modality, stage_idx: int, valid: bool) -> TokenGrid:
        """Tokenize one modality's (C, H, W) input for a stage, adding shared
        positional embeddings (sliced from the stage's learned table)."""
        tokens, grid_shape = self._embed(x.unsqueeze(0), modality, stage_idx)
        return TokenGrid(tokens[0], grid_shape, modality, valid)

    def assemble_hybrid(self, grids: list[TokenGrid], stage_idx: int) -> HybridSequence:
        if [g.modality for g in grids] != list(
            canonical_modality_order(g.modality for g in grids)
        ):
            raise ConfigurationError("grids must arrive in canonical modality order")
        dim = self.cfg.stages[stage_idx].embed_dim
        if any(g.dim != dim for g in grids):
            raise ConfigurationError("token grids disagree with the stage embedding dim")
        mask_parts = [torch.ones(2, dtype=torch.bool)]
        mask_parts.extend(
            torch.full((g.num_tokens,), bool(g.valid), dtype=torch.bool) for g in grids
        )
        return HybridSequence(
            maf=self.maf_tokens[stage_idx],
            maa=self.maa_tokens[stage_idx],
            grids=grids,
            token_mask=torch.cat(mask_parts),
        )

    def run_stage_blocks(self, seq: HybridSequence, stage_idx: int) -> HybridSequence:
        mask = seq.token_mask
        if int(mask.sum()) < 2:
            raise ConfigurationError("need at least the two learnable tokens valid")
        out = self._run_blocks(seq.flatten().unsqueeze(0), mask.unsqueeze(0), stage_idx)
        return seq.with_tokens(out[0])

    def encode(self, sample: MultiModalSample, unifier, return_stage_records: bool = False):
        """Full forward pass for one sample: embed -> hybrid -> blocks -> unify
        per stage, yielding the 4-level unified pyramid."""
        if return_stage_records:
            pyramids, records = self.encode_batch([sample], unifier, True)
            return pyramids[0], records[0]
        return self.encode_batch([sample], unifier)[0]
