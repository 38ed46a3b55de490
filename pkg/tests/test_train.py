"""Trainer: loss contracts, optimizer arithmetic, determinism, CV plumbing."""

import dataclasses

import numpy as np
import pytest

from simil import autodiff as ad
from simil import mil, model, train
from simil.featio import Bag
from simil.topk import TopKConfig

MODEL_CFG = model.ModelConfig(deep_dim=6, path_dim=5, hidden_dim=8, attn_dim=4,
                              mixer_layers=1, si_attn_dim=4,
                              topk=TopKConfig(k=3, sigma=0.05, n_samples=8))


def make_bags(n_per_class, seed, n_patches=(8, 12), prefix="s"):
    rng = np.random.default_rng(seed)
    bags = []
    for i in range(2 * n_per_class):
        label = i % 2
        n = int(rng.integers(*n_patches))
        deep = rng.normal(size=(n, 6))
        path = rng.normal(size=(n, 5))
        if label:
            deep[:, :2] += 1.5
            path[:, :2] += 1.5
        bags.append(Bag(slide_id=f"{prefix}{i:03d}", label=label,
                        deep=deep, path=path))
    return bags


class TestLoss:
    def test_perfect_prediction_near_zero(self):
        loss = train.compute_loss(1, ad.Tensor(1.0 - 1e-7),
                                  ad.Tensor(1.0 - 1e-7), 20.0)
        assert 0.0 <= float(loss.data) < 1e-6

    def test_kd_term_value(self):
        args = (1, ad.Tensor(0.9), ad.Tensor(0.5))
        with_kd = float(train.compute_loss(*args, 20.0).data)
        without = float(train.compute_loss(*args, 0.0).data)
        assert abs((with_kd - without) - 20.0 * 0.16) < 1e-12

    def test_clamping_keeps_loss_finite(self):
        loss = train.compute_loss(1, ad.Tensor(0.0), ad.Tensor(0.0), 0.0)
        want = -2.0 * np.log(1e-7)  # both probabilities exactly wrong
        assert abs(float(loss.data) - want) < 1e-9

    def test_kd_gradient_skips_deep_head(self):
        # the head C touches only the deep-branch probability, whose side of
        # the pull is detached, so its KD gradient is exactly zero
        params = model.init_params(MODEL_CFG, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        out = model.forward(params, MODEL_CFG, rng.normal(size=(7, 6)),
                            rng.normal(size=(7, 5)), "train",
                            np.random.default_rng(2))
        gap = ad.sub(out.y_f, ad.stop_grad(out.y_g))
        grads = ad.backward(ad.mul(ad.mul(gap, gap), 20.0))
        assert np.array_equal(grads[params["mil.head.w"]], np.zeros(8))
        assert np.array_equal(grads[params["mil.head.b"]], np.zeros(()))
        assert np.any(grads[params["si.head.w"]] != 0.0)
        # attention still feels it through the smoothed selection
        assert np.any(grads[params["mil.attn.w"]] != 0.0)

    def test_kd_gradient_blocked_from_all_deep_params_under_barrier(self):
        params = model.init_params(MODEL_CFG, np.random.default_rng(3))
        rng = np.random.default_rng(4)
        out = model.forward(params, MODEL_CFG, rng.normal(size=(7, 6)),
                            rng.normal(size=(7, 5)), "train_barrier")
        gap = ad.sub(out.y_f, ad.stop_grad(out.y_g))
        grads = ad.backward(ad.mul(ad.mul(gap, gap), 20.0))
        for name, p in params.items():
            if name.startswith("mil."):
                g = grads.get(p)
                assert g is None or not np.any(g), name


class TestAdamW:
    def test_single_step_matches_hand_formula(self):
        p = ad.Tensor(np.array([1.0, -2.0]))
        opt = train.AdamW({"w": p}, lr=1e-3, weight_decay=1e-2)
        g = np.array([0.5, -0.25])
        opt.step({p: g})
        m = 0.1 * g
        v = 0.001 * g * g
        update = (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8)
        want = np.array([1.0, -2.0]) - 1e-3 * (update + 1e-2 * np.array([1.0, -2.0]))
        assert np.allclose(p.data, want, atol=1e-15)

    def test_zero_gradient_still_decays(self):
        p = ad.Tensor(np.array([4.0]))
        opt = train.AdamW({"w": p}, lr=1e-3, weight_decay=1e-2)
        for _ in range(3):
            opt.step({p: np.zeros(1)})
        assert abs(p.data[0] - 4.0 * (1.0 - 1e-5) ** 3) < 1e-12

    def test_si_rate_zero_freezes_si_group(self):
        a = ad.Tensor(np.ones(2))
        b = ad.Tensor(np.ones(2))
        opt = train.AdamW({"mil.x": a, "si.y": b}, lr=1e-3,
                          weight_decay=1e-2, si_lr=0.0)
        opt.step({a: np.ones(2), b: np.ones(2)})
        assert np.array_equal(b.data, np.ones(2))
        assert not np.array_equal(a.data, np.ones(2))


class TestAuc:
    def test_pair_counting_example(self):
        assert train.auc_score([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) == 0.75

    def test_perfect_separation(self):
        assert train.auc_score([0, 1, 0, 1], [0.1, 0.9, 0.2, 0.8]) == 1.0

    def test_all_tied_is_half(self):
        assert train.auc_score([0, 1, 0, 1], [0.5, 0.5, 0.5, 0.5]) == 0.5

    def test_single_class_absent(self):
        assert train.auc_score([1, 1], [0.2, 0.9]) is None


class TestTrainConfig:
    def test_grid_enforced(self):
        with pytest.raises(ValueError):
            train.TrainConfig(lr=5e-4)
        with pytest.raises(ValueError):
            train.TrainConfig(weight_decay=1e-3)
        with pytest.raises(ValueError):
            train.TrainConfig(ablations=("dropout",))
        with pytest.raises(ValueError):
            train.TrainConfig(lambda_kd=-1.0)

    def test_json_roundtrip(self):
        cfg = train.TrainConfig(lr=1e-3, weight_decay=5e-3, lambda_kd=5.0,
                                epochs=3, seed=7, folds=3,
                                ablations=("no_kd", "two_stage"), si_lr=0.0)
        assert train.TrainConfig.from_json(cfg.to_json()) == cfg

    def test_defaults_follow_search_grid(self):
        cfg = train.TrainConfig()
        assert cfg.lr in train.LR_GRID and cfg.weight_decay in train.WD_GRID
        assert cfg.lambda_kd == 20.0 and cfg.folds == 5 and cfg.epochs == 50


class TestStratifiedFolds:
    def test_ten_bags_five_folds(self):
        labels = [0, 1] * 5
        folds = train.stratified_folds(labels, 5, np.random.default_rng(0))
        assert len(folds) == 5
        for tr, va in folds:
            assert tr.size == 8 and va.size == 2
            assert {labels[i] for i in va} == {0, 1}
        all_val = np.sort(np.concatenate([va for _, va in folds]))
        assert np.array_equal(all_val, np.arange(10))

    def test_seed_determinism(self):
        labels = [0, 1, 0, 1, 0, 1, 1, 0]
        a = train.stratified_folds(labels, 2, np.random.default_rng(5))
        b = train.stratified_folds(labels, 2, np.random.default_rng(5))
        for (ta, va), (tb, vb) in zip(a, b):
            assert np.array_equal(ta, tb) and np.array_equal(va, vb)

    def test_small_class_rejected(self):
        with pytest.raises(train.DataError):
            train.stratified_folds([0, 0, 0, 1], 2, np.random.default_rng(0))


def _quick_cfg(**kw):
    base = dict(lr=1e-3, weight_decay=1e-2, epochs=2, seed=11, folds=2)
    base.update(kw)
    return train.TrainConfig(**base)


class TestTrainFold:
    def test_same_seed_bitwise_identical(self):
        bags = make_bags(4, seed=20)
        a, _ = train.train_fold(bags[:6], bags[6:], MODEL_CFG, _quick_cfg())
        b, _ = train.train_fold(bags[:6], bags[6:], MODEL_CFG, _quick_cfg())
        assert a.to_json() == b.to_json()

    def test_input_order_irrelevant(self):
        bags = make_bags(4, seed=21)
        a, ca = train.train_fold(bags[:6], bags[6:], MODEL_CFG, _quick_cfg())
        b, cb = train.train_fold(list(reversed(bags[:6])), bags[6:],
                                 MODEL_CFG, _quick_cfg())
        assert a.to_json() == b.to_json()
        assert ca == cb

    def test_missing_class_rejected(self):
        bags = [b for b in make_bags(4, seed=22) if b.label == 1]
        with pytest.raises(train.DataError):
            train.train_fold(bags, bags, MODEL_CFG, _quick_cfg())

    def test_empty_validation_rejected(self):
        bags = make_bags(3, seed=23)
        with pytest.raises(train.DataError):
            train.train_fold(bags, [], MODEL_CFG, _quick_cfg())

    def test_curve_is_one_record_per_epoch(self):
        bags = make_bags(3, seed=24)
        _, curve = train.train_fold(bags[:4], bags[4:], MODEL_CFG,
                                    _quick_cfg(epochs=3))
        assert len(curve) == 3
        assert [r["epoch"] for r in curve] == [0, 1, 2]
        assert all({"train_loss", "val_auc", "val_accuracy"} <= set(r)
                   for r in curve)

    def test_structural_ablations_change_parameter_set(self):
        bags = make_bags(3, seed=25)
        cfg = _quick_cfg(epochs=1, ablations=("no_projector",))
        ckpt, _ = train.train_fold(bags[:4], bags[4:], MODEL_CFG, cfg)
        assert not any(k.startswith("mil.proj.") for k in ckpt.params)

        cfg = _quick_cfg(epochs=1, ablations=("pathfeat_only",))
        ckpt, _ = train.train_fold(bags[:4], bags[4:], MODEL_CFG, cfg)
        assert ckpt.params["mil.proj.w"].shape == (5, 8)

    def test_two_stage_curve_and_frozen_deep_branch(self):
        bags = make_bags(4, seed=26)
        ckpt, curve = train.train_fold(bags[:6], bags[6:], MODEL_CFG,
                                       _quick_cfg(ablations=("two_stage",)))
        stages = [r["stage"] for r in curve]
        assert stages == ["mil", "mil", "si", "si"]
        # deep branch untouched in the second stage: its val AUC is constant
        si_deep = [r["val_auc_deep"] for r in curve if r["stage"] == "si"]
        assert len(set(si_deep)) == 1

    def test_decoupled_deep_branch_matches_reference_loop(self):
        # lambda = 0, si rate 0, selection barrier: the deep branch must
        # train exactly as a standalone attention-MIL would
        bags = make_bags(4, seed=27)
        tr_bags, va_bags = bags[:6], bags[6:]
        cfg = _quick_cfg(epochs=3, ablations=("no_pag_topk", "no_kd"), si_lr=0.0)
        _, curve = train.train_fold(tr_bags, va_bags, MODEL_CFG, cfg)

        seed = np.random.SeedSequence(cfg.seed)
        init_rng, _, shuffle_seed = seed.spawn(3)
        params = model.init_params(MODEL_CFG, np.random.default_rng(init_rng))
        mil_params = {k: v for k, v in params.items() if k.startswith("mil.")}
        opt = train.AdamW(mil_params, cfg.lr, cfg.weight_decay)
        shuffle_rng = np.random.default_rng(shuffle_seed)
        ordered = sorted(tr_bags, key=lambda b: b.slide_id)
        mil_cfg = MODEL_CFG.mil_config

        def deep_prob(bag):
            emb = mil.project(mil_params, mil_cfg, ad.Tensor(bag.deep))
            alpha, _ = mil.patch_attention(mil_params, emb)
            y_g, _ = mil.additive_predict(mil_params, emb, alpha)
            return y_g

        reference = []
        for _ in range(cfg.epochs):
            for i in shuffle_rng.permutation(len(ordered)):
                loss = train.bce(ordered[i].label, deep_prob(ordered[i]))
                opt.step(ad.backward(loss))
            scores = [float(deep_prob(b).data) for b in va_bags]
            reference.append(train.auc_score([b.label for b in va_bags], scores))
        assert [r["val_auc_deep"] for r in curve] == reference


class TestCrossValidate:
    def test_shape_and_shared_test_set(self):
        bags = make_bags(4, seed=30)
        test_bags = make_bags(3, seed=31, prefix="t")
        res = train.cross_validate(bags, test_bags, MODEL_CFG, _quick_cfg())
        assert len(res.folds) == 2 and len(res.checkpoints) == 2
        for fold in res.folds:
            assert [p["slide_id"] for p in fold.predictions] \
                == [b.slide_id for b in test_bags]
        aucs = [f.auc for f in res.folds]
        assert abs(res.mean_auc - np.mean(aucs)) < 1e-12
        assert abs(res.std_auc - np.std(aucs)) < 1e-12
        assert 0.0 <= res.mean_accuracy <= 1.0

    def test_determinism(self):
        bags = make_bags(4, seed=32)
        test_bags = make_bags(2, seed=33, prefix="t")
        a = train.cross_validate(bags, test_bags, MODEL_CFG, _quick_cfg(epochs=1))
        b = train.cross_validate(bags, test_bags, MODEL_CFG, _quick_cfg(epochs=1))
        assert a.to_json() == b.to_json()
        for ca, cb in zip(a.checkpoints, b.checkpoints):
            assert ca.to_json() == cb.to_json()

    def test_too_few_per_class_rejected(self):
        bags = make_bags(2, seed=34)  # 2 per class, 3 folds
        with pytest.raises(train.DataError):
            train.cross_validate(bags, bags, MODEL_CFG, _quick_cfg(folds=3))


@pytest.mark.slow
class TestPlantedSignal:
    def test_si_loss_descends_over_first_ten_epochs(self):
        # ~30 s: three full runs on the default synthetic set; a 5-epoch
        # moving average removes per-epoch shuffle and selection-noise jitter
        from simil.synthgen import BagGenConfig, gen_bags
        cfg = model.ModelConfig(deep_dim=24, path_dim=32)
        for seed in (0, 1, 2):
            bags, _, _ = gen_bags(BagGenConfig(seed=seed))
            tc = train.TrainConfig(lr=2e-4, epochs=10, seed=seed)
            _, curve = train.train_fold(bags[:-80], bags[-80:], cfg, tc)
            si = [r["train_loss_si"] for r in curve]
            assert len(si) == 10
            smoothed = np.convolve(si, np.ones(5) / 5, mode="valid")
            assert np.all(np.diff(smoothed) < 0.0), f"seed {seed}: {smoothed}"
