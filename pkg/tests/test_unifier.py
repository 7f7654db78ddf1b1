import numpy as np
import pytest
import torch

from mmfuse.types import ConfigurationError, HybridSequence, Modality, ModalityConfidence, TokenGrid
from mmfuse.unifier import ModalityUnifier, UnifierParams, unify

from oracles import finite_difference, max_relative_error, scalar_mlp_sigmoid, scalar_unify

MODS = list(Modality)


def make_seq(grids_data, valid_flags, maa, grid_shape):
    grids = [
        TokenGrid(torch.as_tensor(g, dtype=torch.float64), grid_shape, MODS[i], bool(valid_flags[i]))
        for i, g in enumerate(grids_data)
    ]
    n = sum(g.num_tokens for g in grids)
    mask = torch.ones(2 + n, dtype=torch.bool)
    maa_t = torch.as_tensor(maa, dtype=torch.float64)
    return HybridSequence(torch.zeros_like(maa_t), maa_t, grids, mask)


def make_conf(values):
    mods = tuple(MODS[: len(values)])
    return ModalityConfidence(mods, torch.as_tensor(values, dtype=torch.float64))


class TestConfidence:
    def test_zero_mlp_zero_input_gives_half(self):
        unifier = ModalityUnifier([4], (Modality.RGB, Modality.IR))
        for p in unifier.confidence_mlps.parameters():
            torch.nn.init.zeros_(p)
        conf = unifier.confidence(torch.zeros(4), 0)
        assert torch.allclose(conf.values, torch.full((2,), 0.5))

    def test_always_in_open_interval(self):
        torch.manual_seed(0)
        unifier = ModalityUnifier([8], tuple(MODS))
        for _ in range(20):
            conf = unifier.confidence(torch.randn(8) * 10, 0)
            assert ((conf.values > 0) & (conf.values < 1)).all()

    def test_matches_scalar_mlp_oracle(self):
        torch.manual_seed(3)
        unifier = ModalityUnifier([6], tuple(MODS)).double()
        x = torch.randn(6, dtype=torch.float64)
        conf = unifier.confidence(x, 0)
        p = UnifierParams.from_module(unifier, 0)
        expected = scalar_mlp_sigmoid(
            x.numpy(), p.w1.detach().numpy(), p.b1.detach().numpy(),
            p.w2.detach().numpy(), p.b2.detach().numpy(),
        )
        np.testing.assert_allclose(conf.values.detach().numpy(), expected, atol=1e-6)


class TestUnify:
    def test_single_modality_reduction_exact(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((6, 3))
        maa = rng.standard_normal(3)
        c = 0.371
        seq = make_seq([x], [True], maa, (2, 3))
        out = unify(seq, make_conf([c]))
        expected = torch.as_tensor(c * x + maa)
        assert torch.equal(out.tokens, expected)

    def test_invalid_modality_has_zero_influence(self):
        rng = np.random.default_rng(1)
        x1 = rng.standard_normal((4, 3))
        garbage = rng.standard_normal((4, 3)) * 1e9
        maa = rng.standard_normal(3)
        conf = make_conf([0.7, 0.2])
        ref = unify(make_seq([x1], [True], maa, (2, 2)), make_conf([0.7]))
        out = unify(make_seq([x1, garbage], [True, False], maa, (2, 2)), conf)
        assert torch.equal(out.tokens, ref.tokens)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(2)
        x1 = rng.standard_normal((4, 3))
        x2 = rng.standard_normal((4, 3))
        maa = rng.standard_normal(3)
        c = [0.3, 0.8]
        out = unify(make_seq([x1, x2], [True, True], maa, (2, 2)), make_conf(c))
        expected = scalar_unify([x1, x2], c, [1, 1], maa)
        np.testing.assert_allclose(out.tokens.numpy(), expected, atol=1e-7)

    def test_identical_modalities_symmetry(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 4))
        maa = rng.standard_normal(4)
        c = 0.42
        out = unify(make_seq([x, x.copy()], [True, True], maa, (3, 2)), make_conf([c, c]))
        np.testing.assert_allclose(out.tokens.numpy(), c * x + maa, atol=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        grids = [rng.standard_normal((4, 3)) for _ in range(3)]
        maa = rng.standard_normal(3)
        c = [0.2, 0.5, 0.9]
        base = unify(make_seq(grids, [1, 1, 1], maa, (2, 2)), make_conf(c))
        perm = [2, 0, 1]
        seq = make_seq([grids[i] for i in perm], [1, 1, 1], maa, (2, 2))
        # realign grid modalities so confidence lookup follows the permutation
        for slot, src in enumerate(perm):
            seq.grids[slot].modality = MODS[src]
        out = unify(seq, make_conf(c))
        np.testing.assert_allclose(out.tokens.numpy(), base.tokens.numpy(), atol=1e-12)

    def test_linear_in_each_grid(self):
        rng = np.random.default_rng(5)
        x1, x2, delta = (rng.standard_normal((5, 2)) for _ in range(3))
        maa = np.zeros(2)
        c = [0.6, 0.3]
        f = lambda a: unify(make_seq([a, x2], [1, 1], maa, (5, 1)), make_conf(c)).tokens.numpy()
        lhs = f(x1 + 2.0 * delta)
        rhs = f(x1) + 2.0 * (f(delta) - f(np.zeros_like(delta)))
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_all_invalid_rejected(self):
        rng = np.random.default_rng(6)
        seq = make_seq([rng.standard_normal((4, 3))], [False], np.zeros(3), (2, 2))
        with pytest.raises(ConfigurationError):
            unify(seq, make_conf([0.5]))

    def test_mismatched_grid_shapes_rejected(self):
        rng = np.random.default_rng(7)
        g1 = TokenGrid(torch.randn(4, 3), (2, 2), Modality.RGB, True)
        g2 = TokenGrid(torch.randn(6, 3), (2, 3), Modality.IR, True)
        mask = torch.ones(12, dtype=torch.bool)
        seq = HybridSequence(torch.zeros(3), torch.zeros(3), [g1, g2], mask)
        with pytest.raises(ConfigurationError):
            unify(seq, make_conf([0.5, 0.5]))


class TestGradients:
    def test_zero_influence_gradient_when_invalid(self):
        x1 = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
        x2 = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
        maa = torch.zeros(3, dtype=torch.float64)
        grids = [
            TokenGrid(x1, (2, 2), Modality.RGB, True),
            TokenGrid(x2, (2, 2), Modality.IR, False),
        ]
        seq = HybridSequence(torch.zeros(3), maa, grids, torch.ones(10, dtype=torch.bool))
        out = unify(seq, make_conf([0.5, 0.5]))
        out.tokens.sum().backward()
        assert x2.grad is None or not x2.grad.any()
        assert x1.grad is not None and x1.grad.any()

    def test_gradients_match_finite_differences(self):
        """Analytic grads w.r.t. X_i, the abstractor, and MLP weights."""
        torch.manual_seed(0)
        unifier = ModalityUnifier([5], (Modality.RGB, Modality.IR)).double()
        rng = np.random.default_rng(8)
        x_maf = torch.as_tensor(rng.standard_normal(5))
        x1 = torch.as_tensor(rng.standard_normal((4, 5)), dtype=torch.float64)
        x2 = torch.as_tensor(rng.standard_normal((4, 5)), dtype=torch.float64)
        maa0 = rng.standard_normal(5)
        probe = torch.as_tensor(rng.standard_normal((4, 5)))

        def forward(x1_t, x2_t, maa_t):
            conf = unifier.confidence(x_maf, 0)
            grids = [
                TokenGrid(x1_t, (2, 2), Modality.RGB, True),
                TokenGrid(x2_t, (2, 2), Modality.IR, True),
            ]
            seq = HybridSequence(
                x_maf, maa_t, grids, torch.ones(10, dtype=torch.bool)
            )
            return (unify(seq, conf).tokens * probe).sum()

        # grads w.r.t. the token grids and abstractor vector
        for which in range(3):
            leaves = [
                x1.clone().requires_grad_(True),
                x2.clone().requires_grad_(True),
                torch.as_tensor(maa0).requires_grad_(True),
            ]
            out = forward(*leaves)
            out.backward()
            target = leaves[which]
            analytic = target.grad.detach().numpy()

            def f(flat, which=which):
                vals = [x1.clone(), x2.clone(), torch.as_tensor(maa0)]
                vals[which] = torch.as_tensor(flat.reshape(vals[which].shape))
                return float(forward(*vals).detach())

            numeric = finite_difference(f, target.detach().numpy().ravel()).reshape(
                analytic.shape
            )
            assert max_relative_error(analytic, numeric) < 1e-4

        # grads w.r.t. every confidence-MLP parameter
        out = forward(x1, x2, torch.as_tensor(maa0))
        params = list(unifier.confidence_mlps.parameters())
        grads = torch.autograd.grad(out, params)
        for param, grad in zip(params, grads):
            base = param.detach().numpy().copy()

            def f(flat, param=param):
                with torch.no_grad():
                    param.copy_(torch.as_tensor(flat.reshape(param.shape)))
                val = float(forward(x1, x2, torch.as_tensor(maa0)).detach())
                with torch.no_grad():
                    param.copy_(torch.as_tensor(base))
                return val

            numeric = finite_difference(f, base.ravel()).reshape(base.shape)
            assert max_relative_error(grad.numpy(), numeric) < 1e-4


class TestBatchedPath:
    def test_batch_matches_single(self):
        torch.manual_seed(1)
        unifier = ModalityUnifier([4], (Modality.RGB, Modality.IR)).double()
        rng = np.random.default_rng(9)
        grids = torch.as_tensor(rng.standard_normal((2, 2, 6, 4)))  # (B, m, N, D)
        validity = torch.tensor([[True, True], [True, False]])
        maf = torch.as_tensor(rng.standard_normal((2, 4)))
        maa = torch.as_tensor(rng.standard_normal((2, 4)))
        conf = unifier.confidence_batch(maf, 0)
        fused = unifier.unify_batch(grids, validity, conf, maa)
        for b in range(2):
            sample_grids = [
                TokenGrid(grids[b, i], (2, 3), m, bool(validity[b, i]))
                for i, m in enumerate((Modality.RGB, Modality.IR))
            ]
            seq = HybridSequence(
                maf[b], maa[b], sample_grids, torch.ones(14, dtype=torch.bool)
            )
            single = unifier.unify(seq, unifier.confidence(maf[b], 0))
            np.testing.assert_allclose(
                fused[b].detach().numpy(), single.tokens.detach().numpy(), atol=1e-12
            )

    def test_ablated_confidence_is_one(self):
        unifier = ModalityUnifier([4], (Modality.RGB, Modality.IR), use_maf=False)
        conf = unifier.confidence(torch.randn(4), 0)
        assert torch.equal(conf.values, torch.ones(2))

    def test_ablated_abstractor_not_added(self):
        unifier = ModalityUnifier([3], (Modality.RGB,), use_maa=False)
        x = torch.randn(4, 3)
        maa = torch.randn(3)
        grids = [TokenGrid(x, (2, 2), Modality.RGB, True)]
        seq = HybridSequence(torch.zeros(3), maa, grids, torch.ones(6, dtype=torch.bool))
        out = unifier.unify(seq, ModalityConfidence((Modality.RGB,), torch.ones(1)))
        assert torch.allclose(out.tokens, x)
