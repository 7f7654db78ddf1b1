"""Modality dropout and missing-modality padding."""

from dataclasses import dataclass

import numpy as np

from .types import IngestionError, Modality, MultiModalSample, canonical_modality_order


@dataclass(frozen=True)
class DropoutConfig:
    """Probability of dropping one modality from a multi-modal sample."""

    p: float = 0.3
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"dropout probability {self.p} outside [0, 1]")


def apply_modality_dropout(
    sample: MultiModalSample, cfg: DropoutConfig, rng: np.random.Generator
) -> MultiModalSample:
    """With probability p, invalidate one uniformly-chosen valid modality.

    At most one modality is dropped, and never the last valid one: a sample
    with a single valid modality passes through unchanged.  The dropped plane
    is replaced by zeros and its valid flag cleared.
    """
    roll = rng.random()
    valid = sample.valid_modalities()
    if roll >= cfg.p or len(valid) < 2:
        return sample
    victim = valid[rng.integers(len(valid))]
    planes = dict(sample.planes)
    planes[victim] = np.zeros_like(planes[victim])
    flags = dict(sample.valid)
    flags[victim] = False
    return MultiModalSample(sample.sample_id, planes, flags, sample.annotations)


def pad_missing_modality(
    sample: MultiModalSample, vocabulary, channels: dict[Modality, int] | None = None
) -> MultiModalSample:
    """Add an all-zeros, invalid plane for every vocabulary modality the sample lacks."""
    from .types import DEFAULT_CHANNELS

    channels = channels or DEFAULT_CHANNELS
    missing = [m for m in canonical_modality_order(vocabulary) if m not in sample.planes]
    if not missing:
        return sample
    h, w = sample.height, sample.width
    planes = dict(sample.planes)
    flags = dict(sample.valid)
    for m in missing:
        planes[m] = np.zeros((h, w, channels[m]), dtype=np.float32)
        flags[m] = False
    return MultiModalSample(sample.sample_id, planes, flags, sample.annotations)


def mask_to_modalities(sample: MultiModalSample, keep) -> MultiModalSample:
    """Zero out and invalidate every modality not in ``keep`` (scenario masking)."""
    keep = set(keep)
    unknown = keep - set(sample.planes)
    if unknown:
        raise IngestionError(
            f"sample {sample.sample_id}: cannot keep absent modalities "
            f"{sorted(m.name for m in unknown)}"
        )
    planes = dict(sample.planes)
    flags = dict(sample.valid)
    for m in sample.planes:
        if m not in keep:
            planes[m] = np.zeros_like(planes[m])
            flags[m] = False
    return MultiModalSample(sample.sample_id, planes, flags, sample.annotations)
