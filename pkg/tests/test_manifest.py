import json

import numpy as np
import pytest

from mmfuse.manifest import (
    NormalizationConfig,
    load_coco_manifest,
    normalize_plane,
    read_coco_annotations,
    write_coco_annotations,
    write_dataset,
)
from mmfuse.synthetic import SyntheticConfig, synth_toy_dataset
from mmfuse.types import ConfigurationError, IngestionError, Modality

from conftest import random_sample


@pytest.fixture(scope="module")
def written(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    train, _ = synth_toy_dataset(SyntheticConfig(n_train=3, n_test=1, seed=2))
    write_dataset(out, train.samples, train.kinds)
    return out, train


def test_iterates_in_manifest_order(written):
    out, train = written
    ds = load_coco_manifest(out / "manifest.json", normalize=False)
    assert len(ds) == 3
    assert [s.sample_id for s in ds] == [s.sample_id for s in train]


def test_planes_roundtrip_without_normalization(written):
    out, train = written
    ds = load_coco_manifest(out / "manifest.json", normalize=False)
    for loaded, original in zip(ds, train):
        for m in original.planes:
            assert np.array_equal(loaded.planes[m], original.planes[m])
        assert [a.box for a in loaded.annotations] == [a.box for a in original.annotations]


def test_sample_without_annotations_is_legal(tmp_path):
    sample = random_sample(np.random.default_rng(0), hw=(16, 16), n_boxes=0, sample_id="a")
    write_dataset(tmp_path, [sample])
    ds = load_coco_manifest(tmp_path / "manifest.json")
    assert ds[0].annotations == []


def test_rgb_normalization_matches_recompute(tmp_path):
    sample = random_sample(np.random.default_rng(1), hw=(16, 16), sample_id="a")
    write_dataset(tmp_path, [sample])
    norm = NormalizationConfig(rgb_mean=(0.4, 0.5, 0.6), rgb_std=(0.2, 0.25, 0.3))
    ds = load_coco_manifest(tmp_path / "manifest.json", norm, normalize=True)
    loaded = ds[0]
    raw = sample.planes[Modality.RGB]
    expected = (raw - np.array(norm.rgb_mean, np.float32)) / np.array(norm.rgb_std, np.float32)
    assert np.isfinite(loaded.planes[Modality.RGB]).all()
    np.testing.assert_allclose(loaded.planes[Modality.RGB], expected, rtol=1e-6)


def test_nonrgb_maxabs_normalization():
    plane = np.full((4, 4, 1), -2.0, np.float32)
    plane[0, 0, 0] = 4.0
    out = normalize_plane(plane, Modality.IR, NormalizationConfig())
    assert out.max() == 1.0
    assert out.min() == -0.5


def test_missing_plane_file_names_sample(tmp_path, written):
    out, _ = written
    manifest = json.loads((out / "manifest.json").read_text())
    manifest["samples"][0]["planes"]["RGB"] = "planes/nonexistent.npy"
    broken = tmp_path / "manifest.json"
    broken.write_text(json.dumps(manifest))
    ds = load_coco_manifest(broken)
    with pytest.raises(IngestionError, match="train/0000"):
        ds[0]


def test_unknown_modality_key_rejected(tmp_path):
    sample = random_sample(np.random.default_rng(2), hw=(16, 16), sample_id="a")
    write_dataset(tmp_path, [sample])
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["samples"][0]["planes"]["SONAR"] = "planes/whatever.npy"
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ConfigurationError):
        load_coco_manifest(tmp_path / "manifest.json")


def test_coco_annotations_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    samples = [random_sample(rng, hw=(32, 32), sample_id=f"d/{i}") for i in range(3)]
    path = tmp_path / "ann.json"
    write_coco_annotations(path, samples)
    loaded = read_coco_annotations(path)
    for s in samples:
        got = loaded[s.sample_id]
        assert len(got) == len(s.annotations)
        for a, b in zip(got, s.annotations):
            assert a.box == pytest.approx(b.box)
            assert a.category == b.category
