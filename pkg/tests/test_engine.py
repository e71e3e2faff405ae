from pathlib import Path

import numpy as np
import pytest

from kinemod import engine, pipeline
from kinemod.augment import IDENTITY, AugmentParams, apply_augmentation, augment_array, shear_matrix
from kinemod.engine import (
    SGD,
    InputNorm,
    MultiModalModel,
    TrainConfig,
    TrainingDiverged,
    metrics_csv,
    pretrain,
    step_schedule,
)
from kinemod.config import load_config
from kinemod.skeleton import SkeletonSequence

TOY = Path(__file__).parents[1] / "configs" / "toy.ini"

SMALL = dict(bank_capacity=8, batch_size=4, hidden=8, feature_dim=8, head_hidden=8, cz=4, momentum=0.9)


def small(**kw):
    return TrainConfig(**{**SMALL, **kw})


class TestInputNorm:
    def test_modes(self, rng):
        x = rng.normal(size=(6, 3, 10, 4)) * 3 + 2
        assert np.array_equal(InputNorm.fit(x, "none").apply(x), x)
        rms = InputNorm.fit(x, "rms")
        assert np.sqrt(np.mean(rms.apply(x) ** 2)) == pytest.approx(1.0, rel=1e-12)
        c = InputNorm.fit(x, "center").apply(x)
        np.testing.assert_allclose(c.mean(axis=(0, 2)), 0.0, atol=1e-12)
        assert np.sqrt(np.mean(c ** 2)) == pytest.approx(1.0, rel=1e-12)
        s = InputNorm.fit(x, "standardize").apply(x)
        np.testing.assert_allclose(s.std(axis=(0, 2)), 1.0, rtol=1e-12)

    def test_zero_input_safe(self):
        x = np.zeros((2, 3, 5, 4))
        for mode in ("rms", "center", "standardize"):
            assert np.array_equal(InputNorm.fit(x, mode).apply(x), x)

    def test_body_axis(self, rng):
        x = rng.normal(size=(4, 3, 5, 2, 2))
        assert InputNorm.fit(x, "center").apply(x).shape == x.shape

    def test_invalid(self, rng):
        with pytest.raises(ValueError):
            InputNorm.fit(rng.normal(size=(2, 3, 4, 5)), "whiten")
        with pytest.raises(ValueError):
            InputNorm(np.zeros((3, 2)), np.zeros((3, 2)))


class TestOptimizer:
    def test_step_schedule(self):
        assert step_schedule(0.1, 0, 6) == 0.1 and step_schedule(0.1, 5, 6) == pytest.approx(0.01)
        assert step_schedule(1.0, 7, 100, (5, 7)) == pytest.approx(0.01)
        assert step_schedule(1.0, 0, 1) == 1.0

    def test_sgd_matches_hand_computation(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = SGD(p, momentum=0.5, weight_decay=0.1)
        g = {"w": np.array([0.5, 0.5])}
        opt.step(g, 0.1)
        b1 = g["w"] + 0.1 * np.array([1.0, -2.0])
        np.testing.assert_allclose(p["w"], [1.0, -2.0] - 0.1 * b1)
        w1 = p["w"].copy()
        opt.step(g, 0.1)
        np.testing.assert_allclose(p["w"], w1 - 0.1 * (0.5 * b1 + g["w"] + 0.1 * w1))


class TestAugment:
    def test_identity_params(self, rng):
        x = rng.normal(size=(3, 50, 25))
        out, frames = augment_array(x, 80, IDENTITY, rng)
        assert np.array_equal(out, x) and frames == 80

    def test_shear_has_unit_diagonal(self, rng):
        s = shear_matrix(rng, 0.5)
        assert np.array_equal(np.diag(s), np.ones(3)) and np.all(np.abs(s - np.eye(3)) <= 0.5)

    def test_crop_shortens_original_length(self, rng):
        x = rng.normal(size=(3, 50, 25))
        out, frames = augment_array(x, 100, AugmentParams(shear=0.0, crop_min=0.5), np.random.default_rng(0))
        assert out.shape == x.shape and 50 <= frames <= 100

    def test_seeded(self, rng):
        seq = SkeletonSequence(rng.normal(size=(3, 50, 25)), original_frames=60)
        a, b = apply_augmentation(seq, seed=4), apply_augmentation(seq, seed=4)
        assert np.array_equal(a.data, b.data) and a.original_frames == b.original_frames

    def test_invalid(self):
        with pytest.raises(ValueError):
            AugmentParams(shear=-1)
        with pytest.raises(ValueError):
            AugmentParams(crop_min=0)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(tau=0), dict(momentum=1.5), dict(batch_size=0),
                                    dict(modalities=()), dict(modalities=("joint", "joint")),
                                    dict(input_norm="x"), dict(stage1_epochs=-1)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_modality_aliases(self):
        assert TrainConfig(modalities=("JOINT", "motion")).modalities == ("joint", "motion")


class TestPretrain:
    def test_one_epoch_smoke(self, tiny_data, ntu):
        data, _ = tiny_data
        res = pretrain(data, ntu, small(stage1_epochs=1, stage2_epochs=0))
        assert len(res.metrics) == 7 and all(np.isfinite(r["loss"]) for r in res.metrics)
        assert {len(b) for b in res.banks.values()} == {8}
        assert res.model.modalities == list(TrainConfig().modalities)

    def test_stage_one_loss_decreases(self):
        cfg = load_config(TOY, ["pretrain.stage1_epochs=20", "pretrain.stage2_epochs=0"])
        res = pipeline.run_pretrain(cfg, pipeline.prepare(cfg))
        total = [r["loss"] for r in res.metrics if r["modality"] == "all"]
        assert total[19] < total[0]

    def test_frozen_keys_are_bit_identical_in_stage_two(self, tiny_data, ntu):
        data, _ = tiny_data
        a = pretrain(data, ntu, small(stage1_epochs=2, stage2_epochs=0, lr_steps=(100,)))
        b = pretrain(data, ntu, small(stage1_epochs=2, stage2_epochs=2, lr_steps=(100,)))
        for m in ("joint", "bone", "rotation_axis"):
            for name, k in a.model.stacks[m].key.items():
                assert np.array_equal(k, b.model.stacks[m].key[name]), (m, name)
        moved = b.model.stacks["motion"].key["enc.l1.w"]
        assert not np.array_equal(a.model.stacks["motion"].key["enc.l1.w"], moved)

    def test_stage_two_fills_concatenated_bank(self, tiny_data, ntu):
        data, _ = tiny_data
        res = pretrain(data, ntu, small(stage1_epochs=1, stage2_epochs=1))
        assert res.bank_c.entries.shape == (8, 6 * 4)
        assert [r["stage"] for r in res.metrics if r["modality"] == "all"] == [1, 2]

    def test_deterministic(self, tiny_data, ntu):
        data, _ = tiny_data
        a = pretrain(data, ntu, small(stage1_epochs=1, stage2_epochs=1, seed=3))
        b = pretrain(data, ntu, small(stage1_epochs=1, stage2_epochs=1, seed=3))
        assert metrics_csv(a.metrics) == metrics_csv(b.metrics) and a.model.digest() == b.model.digest()

    def test_divergence_saves_checkpoint(self, tiny_data, ntu, tmp_path, monkeypatch):
        data, _ = tiny_data
        monkeypatch.setattr(engine, "info_nce_grad", lambda a, p, n, t: (float("nan"), np.zeros_like(a)))
        with pytest.raises(TrainingDiverged) as err:
            pretrain(data, ntu, small(stage1_epochs=1, stage2_epochs=0), out_dir=tmp_path)
        assert (tmp_path / "diverged.ckpt").exists()
        assert isinstance(err.value, FloatingPointError)

    def test_empty_dataset(self, tiny_data, ntu):
        data, _ = tiny_data
        with pytest.raises(ValueError):
            pretrain(data.subset([]), ntu, small())

    def test_model_round_trip(self, tiny_data, tmp_path):
        _, model = tiny_data
        model.save(tmp_path / "m.ckpt")
        again = MultiModalModel.load(tmp_path / "m.ckpt")
        assert again.digest() == model.digest() and again.meta["kind"] == "pretrain"


def test_metrics_csv_blank_wall_time():
    text = metrics_csv([{"epoch": 1, "stage": 1, "modality": "all", "loss": 0.5, "lr": 0.1, "wall_ms": ""}])
    assert text == "epoch,stage,modality,loss,lr,wall_ms\n1,1,all,0.5,0.1,\n"
