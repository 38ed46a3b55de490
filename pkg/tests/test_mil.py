"""MIL branch: projector, gated attention, additive head, gradient checks."""

import numpy as np
import pytest

from simil import autodiff as ad
from simil.mil import (MilConfig, additive_predict, init_mil_params,
                       patch_attention, project)

CFG = MilConfig(in_dim=4, hidden_dim=6, attn_dim=3)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def forward(params, cfg, g):
    embedded = project(params, cfg, g)
    alpha, _ = patch_attention(params, embedded)
    return additive_predict(params, embedded, alpha)


class TestProject:
    def test_zero_params_give_zero(self):
        params = init_mil_params(CFG, np.random.default_rng(0))
        params["mil.proj.w"] = ad.Tensor(np.zeros((4, 6)))
        out = project(params, CFG, ad.Tensor(np.random.default_rng(1).normal(size=(3, 4))))
        assert np.array_equal(out.data, np.zeros((3, 6)))

    def test_identity_ablation_passes_through(self):
        cfg = MilConfig(in_dim=4, hidden_dim=6, attn_dim=3, use_projector=False)
        params = init_mil_params(cfg, np.random.default_rng(0))
        assert "mil.proj.w" not in params
        g = ad.Tensor(np.random.default_rng(2).normal(size=(3, 4)))
        assert project(params, cfg, g) is g
        assert cfg.embed_dim == 4

    def test_matches_matmul_oracle(self):
        rng = np.random.default_rng(3)
        params = init_mil_params(CFG, rng)
        g = rng.normal(size=(3, 4))
        out = project(params, CFG, ad.Tensor(g))
        want = np.maximum(0.0, g @ params["mil.proj.w"].data
                          + params["mil.proj.b"].data)
        assert np.allclose(out.data, want, atol=1e-12)

    def test_wrong_width_rejected(self):
        params = init_mil_params(CFG, np.random.default_rng(4))
        with pytest.raises(ad.ShapeError):
            project(params, CFG, ad.Tensor(np.ones((3, 5))))


class TestPatchAttention:
    def test_identical_rows_share_weight(self):
        params = init_mil_params(CFG, np.random.default_rng(5))
        x = ad.Tensor(np.tile(np.random.default_rng(6).normal(size=6), (5, 1)))
        alpha, _ = patch_attention(params, x)
        assert np.allclose(alpha.data, np.full(5, 0.2), atol=1e-12)

    def test_single_patch(self):
        params = init_mil_params(CFG, np.random.default_rng(7))
        alpha, _ = patch_attention(params, ad.Tensor(np.random.default_rng(8).normal(size=(1, 6))))
        assert np.allclose(alpha.data, [1.0], atol=1e-15)

    def test_matches_gated_formula_oracle(self):
        rng = np.random.default_rng(9)
        params = init_mil_params(CFG, rng)
        x = rng.normal(size=(5, 6))
        alpha, scores = patch_attention(params, ad.Tensor(x))
        s = (np.tanh(x @ params["mil.attn.v"].data)
             * _sigmoid(x @ params["mil.attn.u"].data)) @ params["mil.attn.w"].data
        e = np.exp(s - s.max())
        assert np.allclose(scores.data, s, atol=1e-12)
        assert np.allclose(alpha.data, e / e.sum(), atol=1e-12)
        assert abs(alpha.data.sum() - 1.0) < 1e-12


class TestAdditivePredict:
    def test_zero_head_gives_half(self):
        params = init_mil_params(CFG, np.random.default_rng(10))
        params["mil.head.w"] = ad.Tensor(np.zeros(6))
        params["mil.head.b"] = ad.Tensor(0.0)
        x = ad.Tensor(np.random.default_rng(11).normal(size=(4, 6)))
        alpha, _ = patch_attention(params, x)
        y, logits = additive_predict(params, x, alpha)
        assert y.data == 0.5
        assert np.array_equal(logits.data, np.zeros(4))

    def test_single_patch_reduction(self):
        params = init_mil_params(CFG, np.random.default_rng(12))
        x = np.random.default_rng(13).normal(size=(1, 6))
        y, _ = additive_predict(params, ad.Tensor(x), ad.Tensor(np.ones(1)))
        want = _sigmoid(x[0] @ params["mil.head.w"].data + params["mil.head.b"].data)
        assert abs(y.data - want) < 1e-15

    def test_six_patch_bag_matches_oracle(self):
        rng = np.random.default_rng(14)
        params = init_mil_params(CFG, rng)
        g = rng.normal(size=(6, 4))
        y, logits = forward(params, CFG, ad.Tensor(g))

        emb = np.maximum(0.0, g @ params["mil.proj.w"].data + params["mil.proj.b"].data)
        s = (np.tanh(emb @ params["mil.attn.v"].data)
             * _sigmoid(emb @ params["mil.attn.u"].data)) @ params["mil.attn.w"].data
        a = np.exp(s - s.max())
        a /= a.sum()
        want_logits = (a[:, None] * emb) @ params["mil.head.w"].data + params["mil.head.b"].data
        assert np.allclose(logits.data, want_logits, atol=1e-12)
        assert abs(y.data - _sigmoid(want_logits.sum())) < 1e-12


class TestInvariants:
    def test_permutation_invariance(self):
        rng = np.random.default_rng(15)
        params = init_mil_params(CFG, rng)
        g = rng.normal(size=(7, 4))
        perm = rng.permutation(7)
        y1, _ = forward(params, CFG, ad.Tensor(g))
        y2, _ = forward(params, CFG, ad.Tensor(g[perm]))
        assert abs(y1.data - y2.data) < 1e-12

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(16)
        params = init_mil_params(CFG, rng)
        g = rng.normal(size=(5, 4))
        names = sorted(params)

        def f(leaves):
            ps = dict(zip(names, leaves))
            y, _ = forward(ps, CFG, ad.Tensor(g))
            return y

        report = ad.grad_check(f, [params[n] for n in names])
        assert report.passed, report.failures
        assert report.max_rel_err <= 1e-4

    def test_affine_per_patch_under_identity_projector(self):
        # fixed alpha, no projector: logits(x) + logits(y) - logits(x + y) = b
        cfg = MilConfig(in_dim=6, hidden_dim=6, attn_dim=3, use_projector=False)
        rng = np.random.default_rng(17)
        params = init_mil_params(cfg, rng)
        alpha = ad.Tensor(np.full(4, 0.25))
        x, y = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
        _, lx = additive_predict(params, ad.Tensor(x), alpha)
        _, ly = additive_predict(params, ad.Tensor(y), alpha)
        _, lxy = additive_predict(params, ad.Tensor(x + y), alpha)
        b = params["mil.head.b"].data
        assert np.allclose(lx.data + ly.data - lxy.data, np.full(4, b), atol=1e-12)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            MilConfig(in_dim=0)
        with pytest.raises(ValueError):
            MilConfig(in_dim=4, attn_dim=0)

    def test_param_names_and_shapes(self):
        params = init_mil_params(MilConfig(in_dim=8), np.random.default_rng(18))
        assert sorted(params) == ["mil.attn.u", "mil.attn.v", "mil.attn.w",
                                  "mil.head.b", "mil.head.w", "mil.proj.b",
                                  "mil.proj.w"]
        assert params["mil.proj.w"].data.shape == (8, 128)
        assert params["mil.attn.v"].data.shape == (128, 64)
        assert params["mil.head.b"].data.shape == ()
