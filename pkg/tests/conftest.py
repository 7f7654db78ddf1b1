import numpy as np
import pytest
import torch

from mmfuse.detector import DetectorConfig, build_detector
from mmfuse.encoder import EncoderConfig, StageConfig
from mmfuse.head import CenterHeadConfig
from mmfuse.types import Annotation, Modality, MultiModalSample

TINY_STAGES = (
    StageConfig(4, 8, 1, 2),
    StageConfig(8, 16, 1, 2),
    StageConfig(16, 32, 1, 4),
    StageConfig(32, 64, 1, 4),
)


def tiny_encoder_config(vocabulary=(Modality.RGB, Modality.IR), max_hw=64) -> EncoderConfig:
    return EncoderConfig(stages=TINY_STAGES, vocabulary=vocabulary, max_input_hw=max_hw)


def tiny_detector_config(vocabulary=(Modality.RGB, Modality.IR), **head_kw) -> DetectorConfig:
    head = CenterHeadConfig(width=32, tower_depth=1, **head_kw)
    return DetectorConfig(encoder=tiny_encoder_config(vocabulary), head=head)


@pytest.fixture
def tiny_model():
    return build_detector(tiny_detector_config(), seed=0)


def random_sample(
    rng: np.random.Generator,
    hw=(64, 64),
    modalities=(Modality.RGB, Modality.IR),
    valid=None,
    n_boxes=2,
    sample_id="s",
) -> MultiModalSample:
    from mmfuse.types import DEFAULT_CHANNELS

    h, w = hw
    valid = dict.fromkeys(modalities, True) | (valid or {})
    planes = {}
    for m in modalities:
        c = DEFAULT_CHANNELS[m]
        if valid[m]:
            planes[m] = rng.random((h, w, c), dtype=np.float32)
        else:
            planes[m] = np.zeros((h, w, c), dtype=np.float32)
    anns = []
    for _ in range(n_boxes):
        x1 = float(rng.uniform(0, w - 12))
        y1 = float(rng.uniform(0, h - 12))
        anns.append(
            Annotation((x1, y1, x1 + float(rng.uniform(6, 12)), y1 + float(rng.uniform(6, 12))))
        )
    return MultiModalSample(sample_id, planes, valid, anns)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
