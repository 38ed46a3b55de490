"""Dual-branch assembly: selection modes, gradient routing, checkpoints."""

import numpy as np
import pytest

from simil import autodiff as ad
from simil import model
from simil.featio import Checkpoint, FormatError
from simil.si import BetaConfig
from simil.topk import TopKConfig

CFG = model.ModelConfig(deep_dim=6, path_dim=5, hidden_dim=8, attn_dim=4,
                        mixer_layers=1, si_attn_dim=4,
                        topk=TopKConfig(k=3, sigma=0.05, n_samples=8))


def _bag(seed, n=9):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 6)), rng.normal(size=(n, 5))


class TestForward:
    def test_outputs_well_formed(self):
        params = model.init_params(CFG, np.random.default_rng(0))
        deep, path = _bag(1)
        out = model.forward(params, CFG, deep, path, "eval")
        assert 0.0 < out.y_g.data < 1.0 and 0.0 < out.y_f.data < 1.0
        assert out.alpha.data.shape == (9,)
        assert abs(out.alpha.data.sum() - 1.0) < 1e-12
        assert out.beta.data.shape == (5,)
        assert out.contributions.data.shape == (3, 5)
        assert out.selected.shape == (3,) and not out.padded

    def test_eval_selects_hard_rows(self):
        params = model.init_params(CFG, np.random.default_rng(2))
        deep, path = _bag(3)
        out = model.forward(params, CFG, deep, path, "eval")
        order = np.argsort(-out.alpha.data, kind="stable")[:3]
        assert np.array_equal(out.selected, order)
        # contributions rebuilt from the exact selected rows
        w, b = params["si.head.w"].data, params["si.head.b"].data
        want = w[None, :] * out.beta.data[None, :] * path[order]
        assert np.allclose(out.contributions.data, want, atol=1e-12)
        assert abs(out.y_f.data
                   - 1.0 / (1.0 + np.exp(-(want.sum() + 3 * b)))) < 1e-9

    def test_train_mode_needs_rng_and_is_seeded(self):
        params = model.init_params(CFG, np.random.default_rng(4))
        deep, path = _bag(5)
        with pytest.raises(ad.ContractError):
            model.forward(params, CFG, deep, path, "train")
        a = model.forward(params, CFG, deep, path, "train", np.random.default_rng(7))
        b = model.forward(params, CFG, deep, path, "train", np.random.default_rng(7))
        assert a.y_f.data == b.y_f.data

    def test_unknown_mode_rejected(self):
        params = model.init_params(CFG, np.random.default_rng(6))
        deep, path = _bag(7)
        with pytest.raises(ad.ContractError):
            model.forward(params, CFG, deep, path, "predict")

    def test_short_bag_flagged(self):
        params = model.init_params(CFG, np.random.default_rng(8))
        deep, path = _bag(9, n=2)
        out = model.forward(params, CFG, deep, path, "eval")
        assert out.padded and out.selected.shape == (3,)

    def test_pathfeat_only_reroutes_mil_input(self):
        cfg = model.ModelConfig(deep_dim=6, path_dim=5, hidden_dim=8, attn_dim=4,
                                mixer_layers=0, si_attn_dim=4,
                                topk=TopKConfig(k=2), pathfeat_only=True)
        params = model.init_params(cfg, np.random.default_rng(10))
        assert params["mil.proj.w"].data.shape == (5, 8)
        deep, path = _bag(11)
        out1 = model.forward(params, cfg, deep, path, "eval")
        out2 = model.forward(params, cfg, np.zeros_like(deep), path, "eval")
        assert out1.y_g.data == out2.y_g.data  # deep features ignored


class TestGradientRouting:
    def test_barrier_cuts_selection_gradient(self):
        params = model.init_params(CFG, np.random.default_rng(12))
        deep, path = _bag(13)
        out = model.forward(params, CFG, deep, path, "train_barrier")
        grads = ad.backward(out.y_f)
        # y_f reaches alpha only through the ranking, which the barrier cuts
        for name in ("mil.attn.v", "mil.attn.u", "mil.attn.w",
                     "mil.proj.w", "mil.proj.b", "mil.head.w", "mil.head.b"):
            g = grads.get(params[name])
            assert g is None or np.array_equal(g, np.zeros_like(g)), name

    def test_perturbed_selection_passes_gradient_to_attention(self):
        params = model.init_params(CFG, np.random.default_rng(14))
        deep, path = _bag(15)
        out = model.forward(params, CFG, deep, path, "train",
                            np.random.default_rng(16))
        grads = ad.backward(out.y_f)
        assert np.any(grads[params["mil.attn.w"]] != 0.0)

    def test_si_params_always_reached(self):
        params = model.init_params(CFG, np.random.default_rng(17))
        deep, path = _bag(18)
        out = model.forward(params, CFG, deep, path, "train_barrier")
        grads = ad.backward(out.y_f)
        assert np.any(grads[params["si.head.w"]] != 0.0)
        assert np.any(grads[params["si.attn.w"]] != 0.0)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        params = model.init_params(CFG, np.random.default_rng(19))
        ckpt = model.pack_checkpoint(params, CFG, {"train": 5})
        back_params, back_cfg = model.unpack_checkpoint(
            Checkpoint.from_json(ckpt.to_json()))
        assert back_cfg == CFG
        assert sorted(back_params) == sorted(params)
        for name in params:
            assert np.array_equal(back_params[name].data, params[name].data)
        deep, path = _bag(20)
        y1 = model.forward(params, CFG, deep, path, "eval").y_f.data
        y2 = model.forward(back_params, back_cfg, deep, path, "eval").y_f.data
        assert y1 == y2

    def test_mismatched_params_rejected(self):
        params = model.init_params(CFG, np.random.default_rng(21))
        ckpt = model.pack_checkpoint(params, CFG, {})
        del ckpt.params["si.head.w"]
        with pytest.raises(FormatError):
            model.unpack_checkpoint(ckpt)

    def test_mismatched_shape_rejected(self):
        params = model.init_params(CFG, np.random.default_rng(22))
        ckpt = model.pack_checkpoint(params, CFG, {})
        ckpt.params["si.head.w"] = np.zeros(7)
        with pytest.raises(FormatError):
            model.unpack_checkpoint(ckpt)


class TestConfig:
    def test_json_roundtrip(self):
        cfg = model.ModelConfig(deep_dim=24, path_dim=117,
                                topk=TopKConfig(k=10, sigma=0.1, n_samples=32),
                                beta=BetaConfig(gamma=0.6, t=2.0),
                                use_projector=False, pathfeat_only=True)
        assert model.ModelConfig.from_json(cfg.to_json()) == cfg

    def test_missing_field_rejected(self):
        obj = CFG.to_json()
        del obj["topk"]
        with pytest.raises(FormatError):
            model.ModelConfig.from_json(obj)

    def test_defaults(self):
        cfg = model.ModelConfig(deep_dim=4, path_dim=10)
        assert cfg.hidden_dim == 128 and cfg.attn_dim == 64
        assert cfg.mixer_layers == 4 and cfg.topk.k == 20
