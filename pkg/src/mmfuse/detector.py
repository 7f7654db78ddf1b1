"""Full detector: unified encoder + modality unifier + pluggable head.

Also owns the checkpoint format (a flat map of named parameter arrays with
shape/dtype metadata plus the config, versioned by a schema integer) and the
vocabulary-restriction surgery used to verify missing-modality equivalence.
"""

import io
import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .encoder import EncoderConfig, MultiModalEncoder
from .head import CenterHead, CenterHeadConfig, PyramidNeck
from .types import CheckpointError, DetectionSet, Modality, MultiModalSample
from .unifier import ModalityUnifier

CHECKPOINT_SCHEMA = 1


@dataclass
class DetectorConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: CenterHeadConfig = field(default_factory=CenterHeadConfig)
    use_maf: bool = True  # learned modality confidence (off: every c_i = 1)
    use_maa: bool = True  # abstractor token added to fused output (off: zero)

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "head": self.head.to_dict(),
            "use_maf": self.use_maf,
            "use_maa": self.use_maa,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(
            encoder=EncoderConfig.from_dict(d["encoder"]),
            head=CenterHeadConfig.from_dict(d["head"]),
            use_maf=d["use_maf"],
            use_maa=d["use_maa"],
        )


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        stage_dims = [s.embed_dim for s in cfg.encoder.stages]
        strides = [s.patch_stride for s in cfg.encoder.stages]
        self.encoder = MultiModalEncoder(cfg.encoder)
        self.unifier = ModalityUnifier(
            stage_dims, cfg.encoder.vocabulary, cfg.use_maf, cfg.use_maa
        )
        self.neck = PyramidNeck(stage_dims, cfg.head.width)
        self.head = CenterHead(cfg.head, cfg.head.width, strides)

    def encode(self, sample: MultiModalSample, return_stage_records: bool = False):
        return self.encoder.encode(sample, self.unifier, return_stage_records)

    def forward_batch(self, samples: list[MultiModalSample]):
        levels, shapes, _ = self.encoder.encode_core(samples, self.unifier)
        return self.head.forward_batch(self.neck.forward_levels(levels), shapes)

    def forward(self, sample: MultiModalSample):
        return [p.sample(0) for p in self.forward_batch([sample])]

    def loss_batch(self, samples: list[MultiModalSample]) -> dict[str, torch.Tensor]:
        """Mean per-sample loss terms; samples are grouped by padded resolution."""
        multiple = self.cfg.encoder.stages[-1].patch_stride
        groups: dict[tuple[int, int], list[int]] = {}
        for i, s in enumerate(samples):
            key = ((-s.height) % multiple + s.height, (-s.width) % multiple + s.width)
            groups.setdefault(key, []).append(i)
        total: dict[str, torch.Tensor] = {}
        for indices in groups.values():
            preds = self.forward_batch([samples[i] for i in indices])
            losses = self.head.loss_batch(preds, [samples[i].annotations for i in indices])
            frac = len(indices) / len(samples)
            for key, val in losses.items():
                total[key] = total.get(key, 0.0) + val * frac
        return total

    def loss(self, sample: MultiModalSample) -> dict[str, torch.Tensor]:
        return self.loss_batch([sample])

    @torch.no_grad()
    def detect(self, sample: MultiModalSample) -> DetectionSet:
        was_training = self.training
        self.eval()
        try:
            preds = self.forward(sample)
            return self.head.decode(preds, (sample.height, sample.width))
        finally:
            self.train(was_training)


def build_detector(cfg: DetectorConfig, seed: int = 0) -> Detector:
    """Deterministic construction: same config + seed -> identical parameters."""
    torch.manual_seed(seed)
    return Detector(cfg)


def parameter_breakdown(model: Detector) -> dict[str, int]:
    """Encoder/unifier parameter counts grouped by role.

    Only ``patch_embed`` scales with the modality vocabulary; the transformer
    blocks, learnable tokens, positional tables, and confidence MLPs are
    shared across modalities.
    """
    groups = {
        "patch_embed": 0,
        "blocks": 0,
        "tokens": 0,
        "pos_tables": 0,
        "unifier_mlp": 0,
        "head": 0,
    }
    for name, p in model.named_parameters():
        n = p.numel()
        if name.startswith("encoder.patch_embeds"):
            groups["patch_embed"] += n
        elif name.startswith("encoder.blocks"):
            groups["blocks"] += n
        elif name.startswith(("encoder.maf_tokens", "encoder.maa_tokens")):
            groups["tokens"] += n
        elif name.startswith("encoder.pos_tables"):
            groups["pos_tables"] += n
        elif name.startswith("unifier."):
            groups["unifier_mlp"] += n
        else:
            groups["head"] += n
    groups["total"] = sum(groups.values())
    return groups


def restrict_vocabulary(model: Detector, subset) -> Detector:
    """A detector over a modality subset sharing every applicable weight.

    Patch embeddings for excluded modalities are simply absent; everything
    else (blocks, tokens, positional tables, confidence MLPs, neck, head) is
    copied verbatim, so outputs on subset-only inputs must agree.
    """
    new_enc = EncoderConfig(
        stages=model.cfg.encoder.stages,
        vocabulary=tuple(subset),
        channels={m: model.cfg.encoder.channels[m] for m in subset},
        max_input_hw=model.cfg.encoder.max_input_hw,
    )
    new_cfg = DetectorConfig(new_enc, model.cfg.head, model.cfg.use_maf, model.cfg.use_maa)
    restricted = build_detector(new_cfg, seed=0)
    source = model.state_dict()
    restricted.load_state_dict(
        {name: source[name] for name in restricted.state_dict()}, strict=True
    )
    return restricted.to(next(model.parameters()).dtype)


def save_checkpoint(model: Detector, path, iteration: int = 0, optimizer=None) -> None:
    """Flat named-array checkpoint (.npz) with config + schema metadata."""
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.state_dict().items():
        arrays[f"param/{name}"] = p.detach().cpu().numpy()
    if optimizer is not None:
        state = optimizer.state_dict()["state"]
        for idx, entry in state.items():
            for key, val in entry.items():
                arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
                arrays[f"opt/{idx}/{key}"] = arr
    meta = {
        "schema": CHECKPOINT_SCHEMA,
        "config": model.cfg.to_dict(),
        "iteration": int(iteration),
        "has_optimizer": optimizer is not None,
    }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, optimizer_factory=None):
    """Rebuild (model, iteration, optimizer) from a checkpoint.

    Raises CheckpointError on unreadable files or schema mismatches; a failed
    load never yields a partial model.
    """
    try:
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if "__meta__" not in arrays:
        raise CheckpointError(f"checkpoint {path} missing metadata")
    meta = json.loads(bytes(arrays["__meta__"]).decode())
    if meta.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(
            f"checkpoint schema {meta.get('schema')} != supported {CHECKPOINT_SCHEMA}"
        )
    cfg = DetectorConfig.from_dict(meta["config"])
    model = build_detector(cfg, seed=0)
    state = {}
    for name, ref in model.state_dict().items():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint {path} missing parameter {name}")
        state[name] = torch.from_numpy(arrays[key]).to(ref.dtype)
    model.load_state_dict(state, strict=True)
    optimizer = None
    if optimizer_factory is not None and meta.get("has_optimizer"):
        optimizer = optimizer_factory(model)
        opt_state = optimizer.state_dict()
        restored = {}
        for idx, _ in enumerate(opt_state["param_groups"][0]["params"]):
            entry = {}
            for key in ("step", "exp_avg", "exp_avg_sq"):
                arr_key = f"opt/{idx}/{key}"
                if arr_key in arrays:
                    val = torch.from_numpy(arrays[arr_key])
                    entry[key] = val if key != "step" else val.reshape(())
            if entry:
                restored[idx] = entry
        opt_state["state"] = restored
        optimizer.load_state_dict(opt_state)
    return model, meta["iteration"], optimizer
