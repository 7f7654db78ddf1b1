"""Deterministic synthetic two-modality detection dataset.

Rectangular targets appear in an RGB-like plane (A) and an IR-like plane (B).
A configurable fraction of samples is "dark": plane A is globally dimmed, the
targets are not drawn in it, and a few unannotated distractor rectangles are.
A "cold" fraction mirrors this for plane B.  Neither modality alone suffices,
which is the point: fusing both is required to detect every target, and a
per-sample modality confidence has something real to learn.
"""

from dataclasses import dataclass, field

import numpy as np

from .types import Annotation, Modality, MultiModalSample


@dataclass(frozen=True)
class SyntheticConfig:
    n_train: int = 240
    n_test: int = 60
    image_size: tuple[int, int] = (64, 64)
    targets_per_image: tuple[int, int] = (1, 2)  # inclusive range
    target_extent: tuple[int, int] = (10, 24)  # box side length range, pixels
    frac_dark: float = 0.35
    frac_cold: float = 0.35
    distractors: int = 2
    noise_sigma: float = 0.04
    dim_factor: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("split sizes must be >= 1")
        if self.frac_dark + self.frac_cold > 1.0:
            raise ValueError("dark + cold fractions exceed 1")


def _place_box(rng: np.random.Generator, h: int, w: int, lo: int, hi: int, avoid, max_tries=50):
    """Sample an axis-aligned box that does not overlap any box in ``avoid``."""
    for _ in range(max_tries):
        bw = int(rng.integers(lo, hi + 1))
        bh = int(rng.integers(lo, hi + 1))
        x1 = int(rng.integers(1, w - bw - 1))
        y1 = int(rng.integers(1, h - bh - 1))
        box = (x1, y1, x1 + bw, y1 + bh)
        if all(
            box[2] <= o[0] or o[2] <= box[0] or box[3] <= o[1] or o[3] <= box[1]
            for o in avoid
        ):
            return box
    return None


def _make_sample(rng: np.random.Generator, cfg: SyntheticConfig, sample_id: str, kind: str):
    h, w = cfg.image_size
    base_a = rng.uniform(0.35, 0.5)
    base_b = rng.uniform(0.15, 0.3)
    plane_a = np.full((h, w, 3), base_a, dtype=np.float64)
    plane_a += rng.uniform(-0.03, 0.03, size=(1, 1, 3))  # slight channel tint
    plane_a += rng.normal(0.0, cfg.noise_sigma, size=(h, w, 3))
    plane_b = np.full((h, w, 1), base_b, dtype=np.float64)
    plane_b += rng.normal(0.0, cfg.noise_sigma, size=(h, w, 1))

    n_targets = int(rng.integers(cfg.targets_per_image[0], cfg.targets_per_image[1] + 1))
    lo, hi = cfg.target_extent
    boxes = []
    for _ in range(n_targets):
        box = _place_box(rng, h, w, lo, hi, boxes)
        if box is None:
            continue
        boxes.append(box)

    def draw(plane, box, value, jitter):
        x1, y1, x2, y2 = box
        fill = value + rng.normal(0.0, jitter, size=plane.shape[2])
        plane[y1:y2, x1:x2, :] = fill

    show_a = kind != "dark"
    show_b = kind != "cold"
    for box in boxes:
        if show_a:
            draw(plane_a, box, rng.uniform(0.85, 0.95), 0.02)
        if show_b:
            draw(plane_b, box, rng.uniform(0.9, 1.0), 0.02)

    # The unreliable plane in a dark/cold sample is globally dimmed (the cue a
    # learned confidence can pick up) and carries unannotated distractor
    # rectangles at full target brightness: taking that plane at face value
    # produces false positives, so a fixed-confidence fusion pays a real cost.
    if kind == "dark":
        plane_a *= cfg.dim_factor
        for _ in range(cfg.distractors):
            box = _place_box(rng, h, w, lo, hi, boxes)
            if box is not None:
                draw(plane_a, box, rng.uniform(0.85, 0.95), 0.02)
    elif kind == "cold":
        plane_b *= cfg.dim_factor
        for _ in range(cfg.distractors):
            box = _place_box(rng, h, w, lo, hi, boxes)
            if box is not None:
                draw(plane_b, box, rng.uniform(0.9, 1.0), 0.02)

    annotations = [Annotation((float(x1), float(y1), float(x2), float(y2))) for x1, y1, x2, y2 in boxes]
    planes = {
        Modality.RGB: np.clip(plane_a, 0.0, 1.0).astype(np.float32),
        Modality.IR: np.clip(plane_b, 0.0, 1.0).astype(np.float32),
    }
    valid = {Modality.RGB: True, Modality.IR: True}
    return MultiModalSample(sample_id, planes, valid, annotations), kind


def _make_split(rng: np.random.Generator, cfg: SyntheticConfig, n: int, prefix: str):
    n_dark = round(cfg.frac_dark * n)
    n_cold = round(cfg.frac_cold * n)
    kinds = ["dark"] * n_dark + ["cold"] * n_cold + ["normal"] * (n - n_dark - n_cold)
    kinds = [kinds[i] for i in rng.permutation(n)]
    samples, labels = [], []
    for i, kind in enumerate(kinds):
        sample, label = _make_sample(rng, cfg, f"{prefix}/{i:04d}", kind)
        samples.append(sample)
        labels.append(label)
    return samples, labels


@dataclass
class SyntheticDataset:
    samples: list[MultiModalSample]
    kinds: list[str] = field(default_factory=list)  # "dark" | "cold" | "normal"

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def synth_toy_dataset(cfg: SyntheticConfig) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Generate (train, test) splits as a pure function of seed and config."""
    rng = np.random.default_rng(cfg.seed)
    train_samples, train_kinds = _make_split(rng, cfg, cfg.n_train, "train")
    test_samples, test_kinds = _make_split(rng, cfg, cfg.n_test, "test")
    return (
        SyntheticDataset(train_samples, train_kinds),
        SyntheticDataset(test_samples, test_kinds),
    )
