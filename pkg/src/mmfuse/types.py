"""Shared vocabulary: modalities, image planes, samples, tokens, boxes, detections.

An image plane is a plain ``numpy.ndarray`` of shape (H, W, C), float32/float64,
finite everywhere.  All planes of one sample share H and W (spatial registration
is the ingestion layer's job).  Token-level types carry ``torch.Tensor`` data.
"""

import dataclasses
import enum
import json
from dataclasses import dataclass, field

import numpy as np
import torch


class ConfigurationError(ValueError):
    """Bad model / pipeline configuration."""


class IngestionError(ValueError):
    """Malformed or inconsistent input data."""


class CheckpointError(RuntimeError):
    """Unreadable or schema-incompatible checkpoint."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


class Modality(enum.Enum):
    """Sensor modalities.  Enum definition order is the canonical order."""

    RGB = "rgb"
    IR = "ir"
    DEPTH = "depth"
    LIDAR = "lidar"
    EVENT = "event"

    @classmethod
    def from_name(cls, name: str) -> "Modality":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ConfigurationError(f"unknown modality {name!r}") from None


# One channel count per modality for the life of a model; RGB defaults to 3.
DEFAULT_CHANNELS: dict[Modality, int] = {
    Modality.RGB: 3,
    Modality.IR: 1,
    Modality.DEPTH: 1,
    Modality.LIDAR: 1,
    Modality.EVENT: 1,
}

_ENUM_RANK = {m: i for i, m in enumerate(Modality)}


def canonical_modality_order(vocabulary) -> list[Modality]:
    """Deterministic total order over a modality vocabulary (fixed enum order)."""
    vocab = list(vocabulary)
    if not vocab:
        raise ConfigurationError("modality vocabulary must not be empty")
    return sorted(set(vocab), key=_ENUM_RANK.__getitem__)


def validate_plane(plane: np.ndarray, name: str = "plane") -> np.ndarray:
    """Check the (H, W, C) image-plane convention; returns the array unchanged."""
    if not isinstance(plane, np.ndarray) or plane.ndim != 3:
        raise IngestionError(f"{name}: expected rank-3 (H, W, C) array")
    h, w, c = plane.shape
    if h <= 0 or w <= 0 or c <= 0:
        raise IngestionError(f"{name}: non-positive dimensions {plane.shape}")
    if not np.isfinite(plane).all():
        raise IngestionError(f"{name}: contains NaN/Inf values")
    return plane


@dataclass(frozen=True)
class Annotation:
    """A ground-truth box in pixel coordinates (x_min, y_min, x_max, y_max)."""

    box: tuple[float, float, float, float]
    category: int = 0
    is_ignore: bool = False

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise IngestionError(f"degenerate box {self.box}")

    def clipped(self, height: int, width: int) -> "Annotation":
        x1, y1, x2, y2 = self.box
        box = (
            min(max(x1, 0.0), float(width)),
            min(max(y1, 0.0), float(height)),
            min(max(x2, 0.0), float(width)),
            min(max(y2, 0.0), float(height)),
        )
        return dataclasses.replace(self, box=box)


@dataclass
class MultiModalSample:
    """Registered per-modality planes plus validity flags and annotations.

    ``valid[m] is False`` means the plane is an all-zeros pad of the sample's
    resolution; an invalid modality carries no information downstream (masked
    in attention, weight zero in fusion).
    """

    sample_id: str
    planes: dict[Modality, np.ndarray]
    valid: dict[Modality, bool]
    annotations: list[Annotation] = field(default_factory=list)

    def __post_init__(self):
        if not self.planes:
            raise IngestionError(f"sample {self.sample_id}: no planes")
        if set(self.planes) != set(self.valid):
            raise IngestionError(f"sample {self.sample_id}: planes/valid key mismatch")
        shape = None
        for m, plane in self.planes.items():
            validate_plane(plane, f"sample {self.sample_id} {m.name}")
            if shape is None:
                shape = plane.shape[:2]
            elif plane.shape[:2] != shape:
                raise IngestionError(
                    f"sample {self.sample_id}: resolution mismatch "
                    f"{plane.shape[:2]} vs {shape}"
                )
            if not self.valid[m] and np.any(plane):
                raise IngestionError(
                    f"sample {self.sample_id}: invalid modality {m.name} "
                    "has a non-zero plane"
                )
        if not any(self.valid.values()):
            raise IngestionError(f"sample {self.sample_id}: no valid modality")

    @property
    def height(self) -> int:
        return next(iter(self.planes.values())).shape[0]

    @property
    def width(self) -> int:
        return next(iter(self.planes.values())).shape[1]

    def modalities(self) -> list[Modality]:
        return canonical_modality_order(self.planes.keys())

    def valid_modalities(self) -> list[Modality]:
        return [m for m in self.modalities() if self.valid[m]]

    def save(self, path) -> None:
        """Lossless serialization (bit-identical arrays on reload)."""
        meta = {
            "sample_id": self.sample_id,
            "valid": {m.name: bool(v) for m, v in self.valid.items()},
            "annotations": [
                {"box": list(a.box), "category": a.category, "is_ignore": a.is_ignore}
                for a in self.annotations
            ],
        }
        arrays = {f"plane_{m.name}": p for m, p in self.planes.items()}
        np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "MultiModalSample":
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            planes = {
                Modality[k.removeprefix("plane_")]: data[k]
                for k in data.files
                if k.startswith("plane_")
            }
        return cls(
            sample_id=meta["sample_id"],
            planes=planes,
            valid={Modality[k]: v for k, v in meta["valid"].items()},
            annotations=[
                Annotation(tuple(a["box"]), a["category"], a["is_ignore"])
                for a in meta["annotations"]
            ],
        )


@dataclass
class TokenGrid:
    """One modality's vision tokens with their spatial layout.

    ``tokens`` has shape (N, D) with N = h * w.  ``valid`` mirrors the sample's
    validity flag for this modality and drives masking and fusion weights.
    """

    tokens: torch.Tensor
    grid_shape: tuple[int, int]
    modality: Modality | None
    valid: bool = True

    def __post_init__(self):
        h, w = self.grid_shape
        if self.tokens.ndim != 2 or self.tokens.shape[0] != h * w:
            raise ConfigurationError(
                f"token grid shape {tuple(self.tokens.shape)} inconsistent with {self.grid_shape}"
            )

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


@dataclass
class HybridSequence:
    """MAF + MAA + concatenated modality token grids, with a validity mask.

    Flattened layout: position 0 is the fuser token, position 1 the abstractor
    token, then each grid's tokens in canonical modality order.  ``token_mask``
    is False exactly over tokens belonging to invalid grids.
    """

    maf: torch.Tensor
    maa: torch.Tensor
    grids: list[TokenGrid]
    token_mask: torch.Tensor

    def __post_init__(self):
        if self.token_mask.shape[0] != self.length:
            raise ConfigurationError("token mask length mismatch")
        if not bool(self.token_mask[0]) or not bool(self.token_mask[1]):
            raise ConfigurationError("fuser/abstractor positions must be mask-valid")

    @property
    def length(self) -> int:
        return 2 + sum(g.num_tokens for g in self.grids)

    def flatten(self) -> torch.Tensor:
        """(L, D) tensor in the canonical layout."""
        parts = [self.maf.unsqueeze(0), self.maa.unsqueeze(0)]
        parts.extend(g.tokens for g in self.grids)
        return torch.cat(parts, dim=0)

    def with_tokens(self, flat: torch.Tensor) -> "HybridSequence":
        """Rebuild the structured view from an updated (L, D) tensor."""
        grids = []
        offset = 2
        for g in self.grids:
            n = g.num_tokens
            grids.append(
                TokenGrid(flat[offset : offset + n], g.grid_shape, g.modality, g.valid)
            )
            offset += n
        return HybridSequence(flat[0], flat[1], grids, self.token_mask)


@dataclass
class ModalityConfidence:
    """Per-modality scalar fusion weights, each strictly inside (0, 1)."""

    modalities: tuple[Modality, ...]
    values: torch.Tensor

    def __post_init__(self):
        if self.values.shape != (len(self.modalities),):
            raise ConfigurationError("confidence vector length mismatch")

    def __getitem__(self, m: Modality) -> torch.Tensor:
        return self.values[self.modalities.index(m)]


@dataclass
class DetectionSet:
    """Scored boxes for one image.  No sort order is assumed."""

    boxes: np.ndarray  # (N, 4) x1, y1, x2, y2
    scores: np.ndarray  # (N,)
    categories: np.ndarray  # (N,) int

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.categories = np.asarray(self.categories, dtype=np.int64).reshape(-1)
        if not (len(self.boxes) == len(self.scores) == len(self.categories)):
            raise ValueError("detection arrays disagree on length")
        if not np.isfinite(self.scores).all():
            raise ValueError("detection scores must be finite")

    def __len__(self) -> int:
        return len(self.scores)

    @classmethod
    def empty(cls) -> "DetectionSet":
        return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))
