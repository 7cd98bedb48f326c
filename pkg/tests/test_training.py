import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from petbench import losses as L
from petbench import training as T
from petbench.models import build_model, preset
from petbench.volumes import ImagePair

TOY = preset("resnet_ed", width=4, n_blocks=1, n_down=1)
DISC = preset("patchgan_small", width=4)


def quick(mode="SUPERVISED", **kw):
    base = dict(mode=mode, epochs=1, batch_size=2, max_lr=1e-3, schedule="CONSTANT", rotate="none", flip=False)
    base.update(kw)
    return T.TrainConfig(**base)


def mean_abs_diff(pairs):
    return float(np.mean([np.abs(p.lt.astype(np.float64) - p.ft).mean() for p in pairs]))


class TestSchedules:
    def test_cos_start(self):
        assert T.lr_at("COS", 0, max_lr=2e-4, epochs=35) == 2e-4

    def test_cos_half_budget(self):
        # half of the budget is a quarter turn of the cosine
        assert T.lr_at("COS", 20, max_lr=2e-4, epochs=40) == pytest.approx(2e-4 * math.cos(math.pi / 4) ** 2)

    def test_cos_within_epoch(self):
        cfg = T.TrainConfig(max_lr=1.0, epochs=2)
        assert T.lr_at(cfg, 0, 2, steps_per_epoch=4) == pytest.approx(0.5 * (1 + math.cos(math.pi / 4)))

    def test_linear_tail(self):
        cfg = T.train_preset("cyclegan")
        assert T.lr_at(cfg, 0) == T.lr_at(cfg, 29) == 1e-4
        assert T.lr_at(cfg, 45) == 0.0
        assert T.lr_at(cfg, 37) == pytest.approx(1e-4 * (1 - 8 / 16))

    def test_beyond_budget(self):
        with pytest.raises(T.ScheduleError):
            T.lr_at(T.train_preset("resnet_ed"), 36)
        with pytest.raises(T.ScheduleError):
            T.lr_at(T.train_preset("cyclegan"), 46)

    def test_constant(self):
        assert T.lr_at("CONSTANT", 7, max_lr=3e-4, epochs=10) == 3e-4

    def test_plateau(self):
        s = T.LRSchedule(T.train_preset("swinir"))
        s.observe(0.8)
        for _ in range(4):
            s.observe(0.7)
        assert s.lr_at(5) == 2.3e-4
        s.observe(0.7)
        assert s.lr_at(6) == pytest.approx(1.15e-4)

    def test_presets(self):
        assert T.train_preset("swinir").epochs == 80 and T.train_preset("swinir").schedule is T.Schedule.REDUCE_ON_PLATEAU
        assert T.train_preset("unet").weight_decay == 0.002
        cg = T.train_preset("cyclegan")
        assert (cg.batch_size, cg.constant_epochs, cg.decay_epochs, cg.max_lr) == (16, 30, 15, 1e-4)
        for name in ("resnet_ed", "unet", "pix2pix"):
            p = T.train_preset(name)
            assert (p.epochs, p.max_lr, p.batch_size, p.schedule) == (35, 2e-4, 32, T.Schedule.COS)

    @pytest.mark.parametrize("kw", [dict(epochs=0), dict(batch_size=0), dict(max_lr=0.0),
                                    dict(rotate="odd"), dict(weight_decay=-1.0)])
    def test_bad_config(self, kw):
        with pytest.raises(T.TrainConfigError):
            T.TrainConfig(**kw)

    def test_config_round_trip(self):
        for cfg in T.TRAIN_PRESETS.values():
            assert T.TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestAugment:
    def pair(self, rng, n=16):
        lt = rng.random((n, n))
        return ImagePair(lt, 2 * lt, "a", 0, "train")

    def test_identity(self, rng):
        p = self.pair(rng)
        out = T.augment(p, rng, params=T.AugmentParams())
        assert np.array_equal(out.lt, p.lt) and np.array_equal(out.ft, p.ft)

    def test_half_turn_twice(self, rng):
        p = self.pair(rng)
        half = T.AugmentParams(angle=180.0)
        out = T.augment(T.augment(p, rng, params=half), rng, params=half)
        assert np.array_equal(out.lt, p.lt) and np.array_equal(out.ft, p.ft)

    def test_seeded(self, rng):
        cfg = T.TrainConfig(patch_size=8)
        a = [T.sample_augment(np.random.default_rng(4), (16, 16), cfg) for _ in range(2)]
        assert a[0] == a[1]

    def test_marker_alignment(self):
        cfg = T.TrainConfig(rotate="right", patch_size=12)
        g = np.random.default_rng(0)
        for _ in range(20):
            lt = np.zeros((16, 16))
            ft = np.zeros((16, 16))
            lt[5, 7] = 1.0
            ft[5, 7] = 3.0
            params = T.sample_augment(g, (16, 16), cfg)
            out = T.augment(ImagePair(lt, ft, "a", 0, "train"), g, params=params)
            where_lt = np.argwhere(out.lt == 1.0)
            np.testing.assert_array_equal(where_lt, np.argwhere(out.ft == 3.0))
            # the marker follows the transform of its coordinates
            coords = np.indices((16, 16)).astype(float)
            moved = [T.apply_augment(c, params) for c in coords]
            if len(where_lt):
                y, x = where_lt[0]
                assert (moved[0][y, x], moved[1][y, x]) == (5, 7)

    def test_free_rotation_linear(self, rng):
        # ft = 2 lt before, so after the shared interpolated rotation as well
        p = self.pair(rng)
        out = T.augment(p, rng, T.TrainConfig(rotate="free", patch_size=10))
        assert out.lt.shape == (10, 10)
        np.testing.assert_allclose(out.ft, 2 * out.lt, rtol=1e-12)

    def test_patch_too_large(self, rng):
        with pytest.raises(T.TrainConfigError):
            T.augment(self.pair(rng), rng, T.TrainConfig(patch_size=32))

    def test_non_square(self, rng):
        with pytest.raises(T.TrainConfigError):
            T.augment(ImagePair(np.zeros((4, 6)), np.zeros((4, 6)), "a", 0, "train"), rng)


class TestSupervised:
    def test_one_epoch_four_pairs(self, tiny_dataset):
        data = {"train": tiny_dataset.split("train")[:4], "val": tiny_dataset.split("val")[:2]}
        rec = T.train_supervised(build_model(TOY, seed=0), data, quick())
        assert len(rec.epochs) == 1 and len(rec.lr_trace) == 2
        assert rec.epochs[0]["val_ssim"] is not None

    def test_lr_trace(self, tiny_dataset):
        tcfg = quick(epochs=3, schedule="COS", batch_size=4)
        rec = T.train_supervised(build_model(TOY, seed=0), tiny_dataset, tcfg)
        steps = T.steps_per_epoch(len(tiny_dataset.split("train")), tcfg)
        expected = [T.lr_at(tcfg, e, s, steps) for e in range(3) for s in range(steps)]
        assert rec.lr_trace == expected

    def test_zero_head_initial_l1(self, tiny_dataset):
        model = build_model(TOY, seed=0).zero_head()
        rec = T.train_supervised(model, tiny_dataset, quick())
        assert rec.initial_train_l1 == pytest.approx(mean_abs_diff(tiny_dataset.split("train")), rel=1e-6)

    def test_loss_decreases(self, tiny_dataset):
        model = build_model(TOY, seed=0).zero_head()
        rec = T.train_supervised(model, tiny_dataset, quick(epochs=5, max_lr=3e-3))
        losses = [e["losses"]["reconstruction"] for e in rec.epochs]
        assert losses[-1] < losses[0]

    def test_checkpoint_fidelity(self, tiny_dataset, tmp_path):
        rec = T.train_supervised(build_model(TOY, seed=0), tiny_dataset, quick(epochs=2), out_dir=tmp_path / "r")
        back, models = T.load_run(tmp_path / "r")
        assert back.best_val_ssim == rec.best_val_ssim
        assert T.validation_ssim(models["G"], tiny_dataset.split("val")) == pytest.approx(rec.best_val_ssim,
                                                                                           abs=1e-6)

    def test_seed_determinism(self, tiny_dataset):
        tcfg = quick(epochs=2, rotate="free", flip=True, patch_size=24)
        a = T.train_supervised(build_model(TOY, seed=3), tiny_dataset, tcfg)
        b = T.train_supervised(build_model(TOY, seed=3), tiny_dataset, tcfg)
        assert [e["losses"] for e in a.epochs] == [e["losses"] for e in b.epochs]

    def test_non_finite_abort(self, tiny_dataset):
        bad = [replace(p, lt=np.full_like(p.lt, np.nan)) for p in tiny_dataset.split("train")]
        with pytest.raises(T.NonFiniteLossError) as err:
            T.train_supervised(build_model(TOY, seed=0), {"train": bad}, quick())
        assert (err.value.epoch, err.value.step) == (0, 0)

    def test_empty_train_split(self):
        with pytest.raises(T.TrainConfigError):
            T.train_supervised(build_model(TOY, seed=0), {"train": []}, quick())

    def test_wrong_loss_mode(self, tiny_dataset):
        with pytest.raises(L.LossConfigError):
            T.train_supervised(build_model(TOY), tiny_dataset, quick(), L.loss_preset("PIX2PIX"))


def _snapshots(mode, lcfg, data, steps=10):
    tcfg = quick(mode=mode, epochs=2, batch_size=2, max_lr=1e-3)
    models = T.build_for_mode(TOY, tcfg, DISC, dtype=torch.float64)
    shots = []

    def grab(step, ms):
        if step <= steps:
            shots.append(torch.cat([p.detach().ravel().clone() for p in ms["G"].parameters()]))

    T.train(models, data, tcfg, lcfg, callback=grab)
    return shots[:steps]


class TestDegeneration:
    def test_pix2pix_without_adversary(self, tiny_dataset):
        ref = _snapshots("SUPERVISED", L.LossConfig("SUPERVISED", w_reconstruction=10.0), tiny_dataset)
        p2p = _snapshots("PIX2PIX", L.LossConfig("PIX2PIX", w_adversarial=0.0, w_reconstruction=10.0),
                         tiny_dataset)
        assert len(ref) == len(p2p) == 10
        assert max(float((a - b).abs().max()) for a, b in zip(ref, p2p)) < 1e-7

    def test_adversary_changes_updates(self, tiny_dataset):
        # control: the comparison above is not vacuous
        ref = _snapshots("SUPERVISED", L.LossConfig("SUPERVISED", w_reconstruction=10.0), tiny_dataset, 3)
        p2p = _snapshots("PIX2PIX", L.LossConfig("PIX2PIX", w_adversarial=1.0, w_reconstruction=10.0),
                         tiny_dataset, 3)
        assert float((ref[-1] - p2p[-1]).abs().max()) > 1e-6

    def test_supervised_cyclegan_without_gan_terms(self, tiny_dataset):
        ref = _snapshots("SUPERVISED", L.LossConfig("SUPERVISED", w_reconstruction=9.2), tiny_dataset)
        cg = _snapshots("CYCLEGAN_SUPERVISED",
                        L.LossConfig("CYCLEGAN_SUPERVISED", w_adversarial=0.0, w_cycle=0.0, w_reconstruction=9.2),
                        tiny_dataset)
        assert len(cg) == 10
        assert max(float((a - b).abs().max()) for a, b in zip(ref, cg)) < 1e-7

    def test_generator_init_independent_of_mode(self):
        a = T.build_for_mode(TOY, quick())["G"]
        b = T.build_for_mode(TOY, quick("CYCLEGAN"), DISC)["G"]
        for p, q in zip(a.parameters(), b.parameters()):
            assert torch.equal(p, q)


def _separable(n=8, size=32):
    g = np.random.default_rng(0)
    pairs = []
    for k in range(n):
        lt = g.uniform(0, 1, (size, size))
        pairs.append(ImagePair(lt, lt + 1.0, f"t{k}", 0, "train"))
    return {"train": pairs}


class TestPix2Pix:
    def test_finite_losses(self, tiny_dataset):
        tcfg = quick("PIX2PIX", epochs=2, batch_size=4)
        models = T.build_for_mode(TOY, tcfg, DISC)
        rec = T.train(models, tiny_dataset, tcfg, L.loss_preset("PIX2PIX"))
        for e in rec.epochs:
            assert all(math.isfinite(v) for v in e["losses"].values())
            assert {"adversarial", "reconstruction", "d_loss"} <= set(e["losses"])

    def test_discriminator_learns_frozen_generator(self):
        tcfg = quick("PIX2PIX", epochs=3, batch_size=4, max_lr=2e-3)
        models = T.build_for_mode(TOY, tcfg, DISC)
        models["G"].zero_head()
        rec = T.train_pix2pix(models["G"], models["D"], _separable(), tcfg, freeze_generator=True)
        assert rec.epochs[-1]["d_accuracy"] > 0.5

    def test_needs_conditional_discriminator(self, tiny_dataset):
        with pytest.raises(T.TrainConfigError):
            T.train_pix2pix(build_model(TOY), build_model(DISC), tiny_dataset, quick("PIX2PIX"))


class TestCycleGAN:
    def test_plain_breakdown(self, tiny_dataset):
        tcfg = quick("CYCLEGAN", batch_size=4)
        lcfg = L.LossConfig("CYCLEGAN", w_adversarial=1.0, w_cycle=10.0)
        rec = T.train(T.build_for_mode(TOY, tcfg, DISC), tiny_dataset, tcfg, lcfg)
        assert set(rec.epochs[0]["losses"]) == {"adversarial", "cycle", "total", "d_loss"}

    def test_identity_snapshot(self, tiny_dataset):
        tcfg = quick("CYCLEGAN_IDENTITY", batch_size=4)
        rec = T.train(T.build_for_mode(TOY, tcfg, DISC), tiny_dataset, tcfg, L.loss_preset("CYCLEGAN_IDENTITY"))
        assert rec.loss["w_identity"] == 2.2
        assert "identity" in rec.epochs[0]["losses"]

    def test_smoke_finite_and_cycle_decreasing(self, tiny_dataset):
        tcfg = quick("CYCLEGAN_IMGPRIOR", epochs=2, batch_size=2, max_lr=2e-3)
        rec = T.train(T.build_for_mode(TOY, tcfg, DISC), tiny_dataset, tcfg, L.loss_preset("CYCLEGAN_IMGPRIOR"))
        for e in rec.epochs:
            assert all(math.isfinite(v) for v in e["losses"].values())
        assert rec.epochs[1]["losses"]["cycle"] < rec.epochs[0]["losses"]["cycle"]

    def test_mode_mismatch(self, tiny_dataset):
        with pytest.raises(T.TrainConfigError):
            T.train({}, tiny_dataset, quick("CYCLEGAN"), L.loss_preset("PIX2PIX"))


class TestTune:
    def test_single_point(self):
        res = T.tune({"loss.w_identity": [3.0]}, 2, lambda p: 1.0)
        assert res.best_params == {"loss.w_identity": 3.0}

    def test_monotone_grid(self):
        res = T.tune({"x": [0.0, 7.5, 15.0, 22.5, 30.0]}, 5, lambda p: p["x"], strategy="grid")
        assert res.best_params == {"x": 30.0} and len(res.trials) == 5

    def test_random_within_range(self):
        res = T.tune(T.SEARCH_SPACES["unet_weight_decay"], 8, lambda p: -p["train.weight_decay"], seed=1)
        values = [t["params"]["train.weight_decay"] for t in res.trials]
        assert all(0.001 <= v <= 0.2 for v in values)
        assert res.best_params["train.weight_decay"] == min(values)

    def test_budget_zero(self):
        with pytest.raises(T.TrainConfigError):
            T.tune({"x": [1]}, 0, lambda p: 0)

    def test_empty_space(self):
        with pytest.raises(T.TrainConfigError):
            T.tune({}, 3, lambda p: 0)

    def test_grid_needs_lists(self):
        with pytest.raises(T.TrainConfigError):
            T.tune({"x": (0.0, 1.0)}, 3, lambda p: 0, strategy="grid")

    def test_apply_params(self):
        t, lo = T.apply_params(quick(), L.loss_preset("CYCLEGAN_IDENTITY"),
                               {"train.weight_decay": 0.01, "loss.w_identity": 5.0})
        assert t.weight_decay == 0.01 and lo.w_identity == 5.0
        with pytest.raises(T.TrainConfigError):
            T.apply_params(quick(), lo, {"w_identity": 1.0})

    def test_tune_training(self, tiny_dataset):
        res = T.tune_training(TOY, tiny_dataset, quick(), L.LossConfig("SUPERVISED"),
                              {"train.max_lr": [1e-4, 1e-3]}, budget=2)
        assert len(res.trials) == 2 and math.isfinite(res.best_score)
