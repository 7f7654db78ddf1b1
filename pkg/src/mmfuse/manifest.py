"""Dataset IO: a manifest pairs sample ids with one plane file per modality;
annotations travel in COCO-format JSON (images / annotations / categories).
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .types import (
    Annotation,
    ConfigurationError,
    IngestionError,
    Modality,
    MultiModalSample,
    canonical_modality_order,
)


@dataclass
class NormalizationConfig:
    """Per-modality ingestion normalization.

    RGB planes get per-channel (x - mean) / std; every other modality is
    scaled by its per-image max absolute value into [-1, 1].
    """

    rgb_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rgb_std: tuple[float, float, float] = (1.0, 1.0, 1.0)


def normalize_plane(plane: np.ndarray, modality: Modality, cfg: NormalizationConfig) -> np.ndarray:
    plane = plane.astype(np.float32)
    if modality is Modality.RGB:
        mean = np.asarray(cfg.rgb_mean, dtype=np.float32)[: plane.shape[2]]
        std = np.asarray(cfg.rgb_std, dtype=np.float32)[: plane.shape[2]]
        return (plane - mean) / std
    peak = np.abs(plane).max()
    return plane / peak if peak > 0 else plane


def write_coco_annotations(path, samples) -> None:
    images, annotations = [], []
    ann_id = 1
    for img_id, sample in enumerate(samples, start=1):
        images.append(
            {
                "id": img_id,
                "file_name": sample.sample_id,
                "height": sample.height,
                "width": sample.width,
            }
        )
        for ann in sample.annotations:
            x1, y1, x2, y2 = ann.box
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": img_id,
                    "category_id": ann.category + 1,
                    "bbox": [x1, y1, x2 - x1, y2 - y1],
                    "area": (x2 - x1) * (y2 - y1),
                    "iscrowd": 1 if ann.is_ignore else 0,
                }
            )
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": 1, "name": "person"}],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def read_coco_annotations(path) -> dict[str, list[Annotation]]:
    """Map file_name -> clipped annotations."""
    with open(path) as fh:
        doc = json.load(fh)
    sizes = {img["id"]: (img["height"], img["width"]) for img in doc["images"]}
    names = {img["id"]: img["file_name"] for img in doc["images"]}
    per_image: dict[str, list[Annotation]] = {name: [] for name in names.values()}
    for ann in doc.get("annotations", []):
        x, y, bw, bh = ann["bbox"]
        if bw <= 0 or bh <= 0:
            continue
        h, w = sizes[ann["image_id"]]
        box = Annotation(
            (x, y, x + bw, y + bh),
            category=ann.get("category_id", 1) - 1,
            is_ignore=bool(ann.get("iscrowd", 0)),
        ).clipped(h, w)
        per_image[names[ann["image_id"]]].append(box)
    return per_image


def write_dataset(out_dir, samples, kinds=None) -> None:
    """Write planes as .npy files plus manifest.json and annotations.json."""
    plane_dir = os.path.join(out_dir, "planes")
    os.makedirs(plane_dir, exist_ok=True)
    entries = []
    for sample in samples:
        rec = {"sample_id": sample.sample_id, "planes": {}, "valid": {}}
        for m in sample.modalities():
            rel = os.path.join("planes", f"{sample.sample_id.replace('/', '_')}_{m.name}.npy")
            np.save(os.path.join(out_dir, rel), sample.planes[m])
            rec["planes"][m.name] = rel
            rec["valid"][m.name] = bool(sample.valid[m])
        entries.append(rec)
    manifest = {"samples": entries}
    if kinds:
        manifest["kinds"] = list(kinds)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    write_coco_annotations(os.path.join(out_dir, "annotations.json"), samples)


@dataclass
class ManifestDataset:
    """Lazily loads samples in manifest order."""

    root: str
    entries: list[dict]
    annotations: dict[str, list[Annotation]]
    normalization: NormalizationConfig = field(default_factory=NormalizationConfig)
    normalize: bool = True

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> MultiModalSample:
        rec = self.entries[i]
        sid = rec["sample_id"]
        planes, valid = {}, {}
        for key, rel in rec["planes"].items():
            modality = Modality.from_name(key)
            path = os.path.join(self.root, rel)
            if not os.path.exists(path):
                raise IngestionError(f"sample {sid}: missing plane file {rel}")
            plane = np.load(path)
            if self.normalize:
                plane = normalize_plane(plane, modality, self.normalization)
            planes[modality] = plane.astype(np.float32)
            valid[modality] = bool(rec.get("valid", {}).get(key, True))
        return MultiModalSample(sid, planes, valid, list(self.annotations.get(sid, [])))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def load_coco_manifest(
    manifest_path,
    normalization: NormalizationConfig | None = None,
    normalize: bool = True,
) -> ManifestDataset:
    """Open a manifest; samples come out in file order, normalized if requested."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    entries = manifest["samples"]
    for rec in entries:
        for key in rec["planes"]:
            Modality.from_name(key)  # raises ConfigurationError on unknown keys
    ann_path = os.path.join(root, "annotations.json")
    annotations = read_coco_annotations(ann_path) if os.path.exists(ann_path) else {}
    return ManifestDataset(
        root, entries, annotations, normalization or NormalizationConfig(), normalize
    )
