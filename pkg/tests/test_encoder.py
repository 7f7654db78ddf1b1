import numpy as np
import pytest
import torch

from mmfuse.detector import (
    DetectorConfig,
    build_detector,
    parameter_breakdown,
    restrict_vocabulary,
)
from mmfuse.encoder import EncoderConfig, MultiModalEncoder, StageConfig, pad_plane_to_multiple
from mmfuse.types import ConfigurationError, Modality, TokenGrid

from conftest import TINY_STAGES, random_sample, tiny_detector_config, tiny_encoder_config


@pytest.fixture(scope="module")
def model64():
    return build_detector(tiny_detector_config(), seed=0).double()


class TestConfig:
    def test_requires_four_stages(self):
        with pytest.raises(ConfigurationError):
            EncoderConfig(stages=TINY_STAGES[:3])

    def test_strides_strictly_increasing(self):
        bad = (TINY_STAGES[0],) * 2 + TINY_STAGES[2:]
        with pytest.raises(ConfigurationError):
            EncoderConfig(stages=bad)

    def test_dims_non_decreasing(self):
        bad = (
            StageConfig(4, 32, 1, 2),
            StageConfig(8, 16, 1, 2),
            StageConfig(16, 32, 1, 2),
            StageConfig(32, 64, 1, 2),
        )
        with pytest.raises(ConfigurationError):
            EncoderConfig(stages=bad)

    def test_head_divisibility(self):
        with pytest.raises(ConfigurationError):
            StageConfig(4, 10, 1, 4)

    def test_roundtrip_dict(self):
        cfg = tiny_encoder_config()
        assert EncoderConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


class TestPatchEmbed:
    def test_stage1_shape_arithmetic(self, model64):
        x = torch.randn(3, 64, 64, dtype=torch.float64)
        grid = model64.encoder.patch_embed(x, Modality.RGB, 0, True)
        assert grid.grid_shape == (16, 16)
        assert grid.num_tokens == 256
        assert grid.dim == 8

    def test_stage2_shape_arithmetic(self, model64):
        x = torch.randn(8, 16, 16, dtype=torch.float64)
        grid = model64.encoder.patch_embed(x, Modality.RGB, 1, True)
        assert grid.grid_shape == (8, 8)

    def test_modality_specific_weights(self, model64):
        x = torch.randn(1, 64, 64, dtype=torch.float64)
        # same values through two different single-channel embeddings
        cfg = tiny_encoder_config(vocabulary=(Modality.IR, Modality.DEPTH))
        torch.manual_seed(1)
        enc = MultiModalEncoder(cfg).double()
        a = enc.patch_embed(x, Modality.IR, 0, True)
        b = enc.patch_embed(x, Modality.DEPTH, 0, True)
        assert not torch.allclose(a.tokens, b.tokens)

    def test_unknown_modality(self, model64):
        x = torch.randn(1, 64, 64, dtype=torch.float64)
        with pytest.raises(ConfigurationError):
            model64.encoder.patch_embed(x, Modality.EVENT, 0, True)

    def test_indivisible_input(self, model64):
        x = torch.randn(3, 62, 64, dtype=torch.float64)
        with pytest.raises(ConfigurationError):
            model64.encoder.patch_embed(x, Modality.RGB, 0, True)

    def test_pad_to_multiple(self):
        plane = np.ones((50, 70, 1), np.float32)
        padded = pad_plane_to_multiple(plane, 32)
        assert padded.shape == (64, 96, 1)
        assert padded[:50, :70].all()
        assert not padded[50:].any() and not padded[:, 70:].any()


class TestAssembleHybrid:
    def grids(self, enc, n=4, dim=8, valid=(True, True)):
        g1 = TokenGrid(torch.randn(n, dim, dtype=torch.float64), (2, 2), Modality.RGB, valid[0])
        g2 = TokenGrid(torch.randn(n, dim, dtype=torch.float64), (2, 2), Modality.IR, valid[1])
        return [g1, g2]

    def test_sequence_length(self, model64):
        seq = model64.encoder.assemble_hybrid(self.grids(model64.encoder), 0)
        assert seq.length == 10
        assert seq.flatten().shape == (10, 8)

    def test_mask_placement_for_invalid_grid(self, model64):
        seq = model64.encoder.assemble_hybrid(
            self.grids(model64.encoder, valid=(True, False)), 0
        )
        assert seq.token_mask[:6].all()
        assert not seq.token_mask[6:].any()

    def test_unimodal_mask_all_true(self, model64):
        g = TokenGrid(torch.randn(4, 8, dtype=torch.float64), (2, 2), Modality.RGB, True)
        seq = model64.encoder.assemble_hybrid([g], 0)
        assert seq.length == 6
        assert seq.token_mask.all()

    def test_rejects_wrong_order(self, model64):
        g = self.grids(model64.encoder)[::-1]
        with pytest.raises(ConfigurationError):
            model64.encoder.assemble_hybrid(g, 0)

    def test_rejects_dim_mismatch(self, model64):
        g = [TokenGrid(torch.randn(4, 16, dtype=torch.float64), (2, 2), Modality.RGB, True)]
        with pytest.raises(ConfigurationError):
            model64.encoder.assemble_hybrid(g, 0)


class TestStageBlocks:
    def test_masked_positions_cannot_influence_valid_ones(self, model64):
        enc = model64.encoder
        g1 = TokenGrid(torch.randn(4, 8, dtype=torch.float64), (2, 2), Modality.RGB, True)
        g2 = TokenGrid(torch.randn(4, 8, dtype=torch.float64), (2, 2), Modality.IR, False)
        seq = enc.assemble_hybrid([g1, g2], 0)
        out1 = enc.run_stage_blocks(seq, 0).flatten()
        g2b = TokenGrid(g2.tokens + 123.0, (2, 2), Modality.IR, False)
        out2 = enc.run_stage_blocks(enc.assemble_hybrid([g1, g2b], 0), 0).flatten()
        assert torch.equal(out1[:6], out2[:6])

    def test_masked_outputs_zeroed(self, model64):
        enc = model64.encoder
        g1 = TokenGrid(torch.randn(4, 8, dtype=torch.float64), (2, 2), Modality.RGB, True)
        g2 = TokenGrid(torch.randn(4, 8, dtype=torch.float64), (2, 2), Modality.IR, False)
        out = enc.run_stage_blocks(enc.assemble_hybrid([g1, g2], 0), 0)
        assert not out.grids[1].tokens.any()

    def test_physical_truncation_equivalence(self, model64):
        enc = model64.encoder
        g1 = TokenGrid(torch.randn(4, 8, dtype=torch.float64), (2, 2), Modality.RGB, True)
        out_short = enc.run_stage_blocks(enc.assemble_hybrid([g1], 0), 0).flatten()
        g2 = TokenGrid(torch.randn(4, 8, dtype=torch.float64), (2, 2), Modality.IR, False)
        out_long = enc.run_stage_blocks(enc.assemble_hybrid([g1, g2], 0), 0).flatten()
        assert torch.allclose(out_short[:6], out_long[:6], atol=1e-6)

    def test_depth_zero_is_identity(self):
        stages = (
            StageConfig(4, 8, 0, 2),
            StageConfig(8, 16, 1, 2),
            StageConfig(16, 32, 1, 2),
            StageConfig(32, 64, 1, 2),
        )
        cfg = EncoderConfig(stages=stages, vocabulary=(Modality.RGB,))
        torch.manual_seed(0)
        enc = MultiModalEncoder(cfg).double()
        g = TokenGrid(torch.randn(4, 8, dtype=torch.float64), (2, 2), Modality.RGB, True)
        seq = enc.assemble_hybrid([g], 0)
        out = enc.run_stage_blocks(seq, 0)
        assert torch.equal(out.flatten(), seq.flatten())

    def test_masked_gradient_is_exactly_zero(self, model64):
        enc = model64.encoder
        t1 = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
        t2 = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
        g1 = TokenGrid(t1, (2, 2), Modality.RGB, True)
        g2 = TokenGrid(t2, (2, 2), Modality.IR, False)
        out = enc.run_stage_blocks(enc.assemble_hybrid([g1, g2], 0), 0)
        valid_out = torch.cat([out.maf[None], out.maa[None], out.grids[0].tokens])
        valid_out.sum().backward()
        assert t2.grad is None or not t2.grad.any()
        assert t1.grad is not None and t1.grad.any()


class TestEncode:
    def test_pyramid_shapes(self, model64):
        sample = random_sample(np.random.default_rng(0), hw=(64, 64))
        pyramid = model64.encode(sample)
        assert [g.grid_shape for g in pyramid] == [(16, 16), (8, 8), (4, 4), (2, 2)]

    def test_unimodal_sample_finite(self, model64):
        sample = random_sample(
            np.random.default_rng(1), hw=(64, 64), valid={Modality.IR: False}
        )
        pyramid = model64.encode(sample)
        for g in pyramid:
            assert torch.isfinite(g.tokens).all()

    def test_missing_modality_equivalence(self, model64):
        restricted = restrict_vocabulary(model64, (Modality.RGB,))
        rng = np.random.default_rng(2)
        for _ in range(3):
            sample = random_sample(rng, hw=(64, 64), valid={Modality.IR: False})
            full = model64.encode(sample)
            alone = restricted.encode(sample)
            for a, b in zip(full, alone):
                assert torch.allclose(a.tokens, b.tokens, atol=1e-6)

    def test_non_multiple_resolution_padded(self, model64):
        sample = random_sample(np.random.default_rng(3), hw=(50, 70))
        pyramid = model64.encode(sample)
        assert pyramid[0].grid_shape == (16, 24)  # padded to (64, 96)


class TestParameterSharing:
    def test_only_patch_embeddings_scale_with_vocabulary(self):
        counts = {}
        for vocab in ((Modality.RGB,), tuple(Modality)):
            model = build_detector(tiny_detector_config(vocabulary=vocab), seed=0)
            counts[len(vocab)] = parameter_breakdown(model)
        one, five = counts[1], counts[5]
        assert one["blocks"] == five["blocks"]
        assert one["unifier_mlp"] == five["unifier_mlp"]
        assert one["tokens"] == five["tokens"]
        assert one["pos_tables"] == five["pos_tables"]
        assert one["head"] == five["head"]
        assert five["patch_embed"] > one["patch_embed"]
        assert five["total"] - one["total"] == five["patch_embed"] - one["patch_embed"]
