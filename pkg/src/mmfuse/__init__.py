"""mmfuse: multi-modal pedestrian detection with learnable fusion tokens."""

from .types import (
    Annotation,
    CheckpointError,
    ConfigurationError,
    DetectionSet,
    HybridSequence,
    IngestionError,
    Modality,
    ModalityConfidence,
    MultiModalSample,
    TokenGrid,
    TrainingDivergedError,
    canonical_modality_order,
)

__version__ = "0.1.0"

__all__ = [
    "Annotation",
    "CheckpointError",
    "ConfigurationError",
    "DetectionSet",
    "HybridSequence",
    "IngestionError",
    "Modality",
    "ModalityConfidence",
    "MultiModalSample",
    "TokenGrid",
    "TrainingDivergedError",
    "canonical_modality_order",
    "__version__",
]
