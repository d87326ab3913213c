import numpy as np
import pytest

from mimdeep.masking import sample_mask
from mimdeep.model import ModelConfig, init_params
from mimdeep.targets import TargetSpec
from mimdeep.tensor import Tensor
from mimdeep.training import (
    TrainConfig,
    _split,
    _train_head_on_features,
    adamw_step,
    cosine_lr,
    finetune,
    linear_probe,
    new_opt_state,
    pretrain,
    total_loss,
    validation_loss,
    write_log_csv,
)


TINY = dict(image_size=16, patch_size=4, embed_dim=16, depth=2, num_heads=2,
            decoder_dim=8, decoder_depth=1, tap_indices=(1,))


@pytest.fixture
def rng():
    return np.random.default_rng(21)


class TestTrainConfig:
    def test_lr_linear_scaling(self):
        cfg = TrainConfig(base_lr=1.5e-4, batch_size=256)
        assert cfg.lr == pytest.approx(1.5e-4)
        assert TrainConfig(base_lr=1.5e-4, batch_size=64).lr == pytest.approx(1.5e-4 / 4)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            TrainConfig(mode="dropout")

    def test_warmup_bound(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=5, warmup_epochs=5)

    def test_freeze_reinit_exclusive(self):
        with pytest.raises(ValueError):
            TrainConfig(freeze_first_k=1, reinit_last_k=1)


class TestTotalLoss:
    def test_single_decoder_equals_masked_mse(self, rng):
        plan = sample_mask(8, 0.75, rng)
        pred = Tensor(rng.standard_normal((2, 8, 5)).astype(np.float32))
        tgt = rng.standard_normal((2, 8, 5)).astype(np.float32)
        tot, per = total_loss({"final": pred}, {"final": tgt}, plan)
        assert float(tot.data) == pytest.approx(float(per["final"].data))
        expect = np.mean((pred.data[:, list(plan.masked)] - tgt[:, list(plan.masked)]) ** 2)
        assert float(tot.data) == pytest.approx(expect, abs=1e-6)

    def test_sum_of_parts(self, rng):
        plan = sample_mask(8, 0.75, rng)
        preds = {f"tap{i}": Tensor(rng.standard_normal((1, 8, 3)).astype(np.float32))
                 for i in (1, 2, 3)}
        preds["final"] = Tensor(rng.standard_normal((1, 8, 3)).astype(np.float32))
        tgts = {k: rng.standard_normal((1, 8, 3)).astype(np.float32) for k in preds}
        tot, per = total_loss(preds, tgts, plan)
        assert float(tot.data) == pytest.approx(sum(float(l.data) for l in per.values()),
                                                abs=1e-6)

    def test_visible_target_rows_are_irrelevant(self, rng):
        # the loss selects masked rows, so perturbing a target at visible
        # positions must leave it unchanged
        plan = sample_mask(8, 0.75, rng)
        pred = Tensor(rng.standard_normal((2, 8, 3)).astype(np.float32))
        tgt = rng.standard_normal((2, 8, 3)).astype(np.float32)
        a, _ = total_loss({"final": pred}, {"final": tgt}, plan)
        perturbed = tgt.copy()
        perturbed[:, list(plan.visible)] += 100.0
        b, _ = total_loss({"final": pred}, {"final": perturbed}, plan)
        assert float(a.data) == float(b.data)

    def test_key_mismatch(self, rng):
        plan = sample_mask(8, 0.75, rng)
        with pytest.raises(ValueError):
            total_loss({"a": Tensor(np.zeros((1, 8, 2)))},
                       {"b": np.zeros((1, 8, 2))}, plan)


class TestAdamW:
    def test_first_step_closed_form(self):
        # with fresh moments, m-hat = g and v-hat = g^2, so the update is
        # sign(g) * lr / (1 + eps/|g|) on top of multiplicative decay
        w0, g, lr, wd = 2.0, 0.5, 0.1, 0.05
        p = {"layer.w": Tensor(np.array([w0], dtype=np.float32), requires_grad=True)}
        p["layer.w"].grad = np.array([g], dtype=np.float32)
        adamw_step(p, new_opt_state(), lr, weight_decay=wd)
        expect = w0 * (1 - lr * wd) - lr * g / (abs(g) + 1e-8)
        assert p["layer.w"].data[0] == pytest.approx(expect, rel=1e-6)

    def test_two_step_moment_recursion(self):
        b1, b2, lr, eps = 0.9, 0.95, 0.01, 1e-8
        grads = [0.3, -0.7]
        p = {"layer.w": Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)}
        state = new_opt_state()
        w, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            p["layer.w"].grad = np.array([g], dtype=np.float32)
            adamw_step(p, state, lr, weight_decay=0.0)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert p["layer.w"].data[0] == pytest.approx(w, rel=1e-5)

    def test_decay_exemptions(self):
        lr, wd = 0.1, 0.5
        params = {
            "enc.block1.attn.q.b": Tensor(np.array([1.0], dtype=np.float32), requires_grad=True),
            "enc.norm.gamma": Tensor(np.array([1.0], dtype=np.float32), requires_grad=True),
            "dec.final.mask_token": Tensor(np.array([1.0], dtype=np.float32), requires_grad=True),
            "enc.block1.attn.q.w": Tensor(np.array([1.0], dtype=np.float32), requires_grad=True),
        }
        # zero gradients: the Adam update vanishes, leaving pure decay
        adamw_step(params, new_opt_state(), lr, weight_decay=wd)
        assert params["enc.block1.attn.q.b"].data[0] == pytest.approx(1.0)
        assert params["enc.norm.gamma"].data[0] == pytest.approx(1.0)
        assert params["dec.final.mask_token"].data[0] == pytest.approx(1.0)
        assert params["enc.block1.attn.q.w"].data[0] == pytest.approx(1 - lr * wd)

    def test_non_finite_gradient_names_parameter(self):
        p = {"enc.pos": Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)}
        p["enc.pos"].grad = np.array([np.nan], dtype=np.float32)
        with pytest.raises(FloatingPointError, match="enc.pos"):
            adamw_step(p, new_opt_state(), 0.1)

    def test_frozen_params_untouched(self):
        p = {"enc.pos": Tensor(np.array([3.0], dtype=np.float32), requires_grad=False)}
        adamw_step(p, new_opt_state(), 0.1, weight_decay=0.5)
        assert p["enc.pos"].data[0] == 3.0


class TestCosineLr:
    def test_warmup_junctions(self):
        base = 1.0
        assert cosine_lr(0, 100, 10, base) == 0.0
        assert cosine_lr(5, 100, 10, base) == pytest.approx(0.5)
        assert cosine_lr(10, 100, 10, base) == pytest.approx(base)

    def test_midpoint_and_end(self):
        base = 2.0
        assert cosine_lr(55, 100, 10, base) == pytest.approx(base / 2)
        assert cosine_lr(100, 100, 10, base) == pytest.approx(0.0, abs=1e-12)

    def test_monotone_decay_after_warmup(self):
        vals = [cosine_lr(s, 100, 10, 1.0) for s in range(10, 101)]
        assert all(u >= v for u, v in zip(vals, vals[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(101, 100, 10, 1.0)


def _tiny_run(seed=0, steps=None, **overrides):
    cfg = ModelConfig(**TINY)
    tc = TrainConfig(epochs=2, batch_size=8, base_lr=1e-3, seed=seed, **overrides)
    rng = np.random.default_rng(99)
    images = rng.random((16, 3, 16, 16)).astype(np.float32)
    specs = {"tap1": TargetSpec(), "final": TargetSpec()}
    return pretrain(cfg, tc, specs, images, val_images=images[:4],
                    stop_after_steps=steps)


class TestPretrain:
    def test_smoke_and_record_structure(self):
        result = _tiny_run()
        assert len(result.records) == 4  # 2 epochs x 16/8 steps
        for rec in result.records:
            assert set(rec.losses) == {"tap1", "final"}
            assert rec.total == pytest.approx(sum(rec.losses.values()), abs=1e-5)
            assert np.isfinite(rec.total)
        assert len(result.val_records) == 2

    def test_bitwise_determinism(self):
        a = _tiny_run(seed=3)
        b = _tiny_run(seed=3)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
        assert [r.total for r in a.records] == [r.total for r in b.records]

    def test_seed_changes_run(self):
        a = _tiny_run(seed=3)
        b = _tiny_run(seed=4)
        assert [r.total for r in a.records] != [r.total for r in b.records]

    def test_stop_after_steps(self):
        partial = _tiny_run(seed=3, steps=2)
        assert len(partial.records) == 2
        assert partial.val_records == []

    def test_resume_matches_uninterrupted(self):
        full = _tiny_run(seed=5)
        part = _tiny_run(seed=5, steps=2)
        cfg = ModelConfig(**TINY)
        tc = TrainConfig(epochs=2, batch_size=8, base_lr=1e-3, seed=5)
        images = np.random.default_rng(99).random((16, 3, 16, 16)).astype(np.float32)
        specs = {"tap1": TargetSpec(), "final": TargetSpec()}
        resumed = pretrain(cfg, tc, specs, images, val_images=images[:4],
                           resume=(part.params, part.opt_state, 2))
        for name in full.params:
            np.testing.assert_array_equal(resumed.params[name].data,
                                          full.params[name].data)

    def test_mode_tap_consistency(self):
        cfg = ModelConfig(**TINY)
        tc = TrainConfig(mode="baseline_mae")
        images = np.zeros((4, 3, 16, 16), dtype=np.float32)
        with pytest.raises(ValueError):
            pretrain(cfg, tc, {"tap1": TargetSpec(), "final": TargetSpec()}, images)

    def test_log_csv_columns(self, tmp_path):
        result = _tiny_run()
        path = tmp_path / "train_log.csv"
        write_log_csv(result, str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == "step,lr,loss_total,loss_dec_final,loss_dec_tap1,val_loss"
        assert len(lines) == 1 + 4 + 2
        first = lines[1].split(",")
        assert first[0] == "0" and first[-1] == ""


class TestValidationLoss:
    def test_deterministic_and_finite(self, rng):
        cfg = ModelConfig(**TINY)
        params = init_params(cfg, seed=0)
        images = rng.random((6, 3, 16, 16)).astype(np.float32)
        a = validation_loss(params, cfg, images, TargetSpec(), seed=1)
        b = validation_loss(params, cfg, images, TargetSpec(), seed=1)
        assert a == b
        assert np.isfinite(a)


class TestSplit:
    def test_disjoint_cover(self):
        tr, ho = _split(20, seed=0)
        assert sorted(np.concatenate([tr, ho])) == list(range(20))
        assert len(ho) == 4


class TestHeadTraining:
    def test_separable_features_learned(self):
        # one-hot class features are linearly separable: accuracy ~ 1
        rng = np.random.default_rng(0)
        labels = np.repeat(np.arange(4), 25)
        feats = np.eye(4, dtype=np.float32)[labels] * 5 + \
            rng.normal(0, 0.1, (100, 4)).astype(np.float32)
        tc = TrainConfig(epochs=50, batch_size=32, base_lr=1e-2, seed=0)
        acc, _ = _train_head_on_features(feats, labels, 4, tc)
        assert acc > 0.9

    def test_random_features_near_chance(self):
        rng = np.random.default_rng(0)
        feats = rng.normal(0, 1, (200, 8)).astype(np.float32)
        labels = rng.integers(0, 4, 200)
        tc = TrainConfig(epochs=20, batch_size=32, base_lr=1e-2, seed=0)
        acc, _ = _train_head_on_features(feats, labels, 4, tc)
        assert acc < 0.6


class TestFinetune:
    def _data(self):
        rng = np.random.default_rng(17)
        images = rng.random((20, 3, 16, 16)).astype(np.float32)
        labels = np.tile(np.arange(4), 5)
        return images, labels

    def test_caller_params_untouched(self):
        cfg = ModelConfig(**TINY)
        params = init_params(cfg, seed=0)
        before = {n: t.data.copy() for n, t in params.items()}
        images, labels = self._data()
        finetune(params, cfg, images, labels, 4,
                 TrainConfig(epochs=2, batch_size=8, base_lr=1e-3, seed=0))
        for name in params:
            np.testing.assert_array_equal(params[name].data, before[name])

    def test_full_freeze_equals_probe(self):
        cfg = ModelConfig(**TINY)
        params = init_params(cfg, seed=0)
        images, labels = self._data()
        tc = TrainConfig(epochs=3, batch_size=8, base_lr=1e-3, seed=0,
                         freeze_first_k=cfg.depth)
        acc_ft = finetune(params, cfg, images, labels, 4, tc)
        tc2 = TrainConfig(epochs=3, batch_size=8, base_lr=1e-3, seed=0)
        acc_probe = linear_probe(params, cfg, cfg.depth, images, labels, 4, tc2)
        assert acc_ft == acc_probe

    def test_freeze_out_of_range(self):
        cfg = ModelConfig(**TINY)
        params = init_params(cfg, seed=0)
        images, labels = self._data()
        with pytest.raises(ValueError):
            finetune(params, cfg, images, labels, 4,
                     TrainConfig(epochs=1, freeze_first_k=5))

    def test_probe_tap_range(self):
        cfg = ModelConfig(**TINY)
        params = init_params(cfg, seed=0)
        images, labels = self._data()
        with pytest.raises(ValueError):
            linear_probe(params, cfg, 0, images, labels, 4, TrainConfig(epochs=1))
