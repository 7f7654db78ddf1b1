"""Two-stage training: RGB-only pretrain, then mixed multi-modal with dropout.

Single-process and deterministic: a fixed seed reproduces the loss history
bit for bit.  The optimizer is AdamW with linear warmup and step decay.
"""

import enum
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
import torch

from .detector import Detector, load_checkpoint, save_checkpoint
from .dropout import DropoutConfig, apply_modality_dropout, mask_to_modalities
from .types import Modality, TrainingDivergedError


class TrainStage(enum.Enum):
    RGB_PRETRAIN = "rgb-pretrain"
    MULTIMODAL = "multimodal"


@dataclass
class TrainConfig:
    stage: TrainStage = TrainStage.MULTIMODAL
    iterations: int = 1000
    base_lr: float = 2e-3
    warmup_iters: int = 100
    decay_milestones: tuple[int, ...] = (700, 900)
    weight_decay: float = 1e-4
    dropout: DropoutConfig = field(default_factory=lambda: DropoutConfig(p=0.3))
    seed: int = 0
    batch_size: int = 8
    grad_clip: float = 1.0

    def __post_init__(self):
        if isinstance(self.stage, str):
            self.stage = TrainStage(self.stage)
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")
        ms = tuple(self.decay_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("decay milestones must be strictly increasing")
        self.decay_milestones = ms


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """lr(i) = base * i / warmup while warming up, then base * 0.1^(milestones passed)."""
    if iteration < cfg.warmup_iters:
        return cfg.base_lr * iteration / cfg.warmup_iters
    passed = sum(1 for m in cfg.decay_milestones if m <= iteration)
    return cfg.base_lr * (0.1 ** passed)


def make_optimizer(model: Detector, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.base_lr,
        betas=(0.9, 0.999),
        weight_decay=cfg.weight_decay,
    )


@dataclass
class TrainResult:
    model: Detector
    history: list[dict]
    final_iteration: int


def train_stage(
    model: Detector,
    dataset,
    cfg: TrainConfig,
    start_iteration: int = 0,
    optimizer: torch.optim.AdamW | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Run one training stage and return the model plus per-iteration history.

    RGB_PRETRAIN masks every sample down to the RGB modality; MULTIMODAL
    applies modality dropout per sample.  A non-finite loss aborts with the
    offending iteration and sample ids in the message.
    """
    # Small-tensor workload: intra-op threading only adds contention.
    torch.set_num_threads(1)
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.dropout.rng_seed)
    optimizer = optimizer or make_optimizer(model, cfg)
    model.train()
    history: list[dict] = []
    end = start_iteration + cfg.iterations
    for it in range(start_iteration, end):
        lr = lr_at(it, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        batch = []
        for i in idx:
            sample = dataset[int(i)]
            if cfg.stage is TrainStage.RGB_PRETRAIN:
                sample = mask_to_modalities(sample, {Modality.RGB})
            else:
                sample = apply_modality_dropout(sample, cfg.dropout, drop_rng)
            batch.append(sample)
        losses = model.loss_batch(batch)
        total = losses["total"]
        if not torch.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it} on batch "
                f"{[s.sample_id for s in batch]}"
            )
        optimizer.zero_grad()
        total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optimizer.step()
        record = {"iteration": it, "lr": lr, "total": float(total.detach())}
        record.update(
            {k: float(v.detach()) for k, v in losses.items() if k != "total"}
        )
        history.append(record)
        if log_every and (it - start_iteration) % log_every == 0:
            print(f"iter {it} lr {lr:.2e} loss {record['total']:.4f}", flush=True)
    return TrainResult(model, history, end)


def checkpoint_roundtrip(model: Detector, iteration: int = 0) -> Detector:
    """Save to a temporary file and load back; parameters survive bit-identically."""
    fd, path = tempfile.mkstemp(suffix=".npz")
    os.close(fd)
    try:
        save_checkpoint(model, path, iteration)
        restored, _, _ = load_checkpoint(path)
    finally:
        os.unlink(path)
    return restored


def write_history_csv(history: list[dict], path) -> None:
    if not history:
        return
    keys = list(history[0].keys())
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for rec in history:
            fh.write(",".join(repr(rec[k]) for k in keys) + "\n")
