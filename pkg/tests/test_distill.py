import math

import numpy as np
import oracles
import pytest
from conftest import unit_rows

from kinemod.distill import (
    DistillConfig,
    build_students,
    distill_loss_grad,
    distill_train,
    moco_grad,
    relation_sets,
    teacher_embed_arrays,
)
from kinemod.engine import clean_arrays


def setup(rng, B=3, K=6, n_teacher=3, cz=4, students=("joint", "motion")):
    w = n_teacher * cz
    return unit_rows(rng, B, w), {u: unit_rows(rng, B, w) for u in students}, unit_rows(rng, K, w)


def numeric_grad(fn, x, h=1e-6):
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        d = np.zeros_like(x)
        d[idx] = h
        out[idx] = (fn(x + d) - fn(x - d)) / (2 * h)
    return out


class TestRelationalLoss:
    def test_oracle(self, rng):
        for trial in range(20):
            n_teacher = 2 + trial % 3
            z_t, z_s, bank = setup(rng, n_teacher=n_teacher, students=("joint", "motion")[: 1 + trial % 2])
            loss, _, _ = distill_loss_grad(z_t, z_s, bank, 0.07, n_teacher)
            ref = oracles.distill(z_t.tolist(), {u: v.tolist() for u, v in z_s.items()}, bank.tolist(), 0.07, n_teacher)
            assert abs(loss - ref) <= 1e-10 * max(abs(ref), 1.0)

    def test_bank_of_one_gives_zero(self, rng):
        z_t, z_s, bank = setup(rng, K=1)
        assert distill_loss_grad(z_t, z_s, bank, 0.07, 3)[0] == pytest.approx(0.0, abs=1e-12)

    def test_equal_products_closed_form(self, rng):
        z_t, z_s, _ = setup(rng, B=1, students=("joint",))
        K, tau = 5, 0.3
        bank = np.tile(unit_rows(rng, 1, 12), (K, 1))
        p = float(z_t[0] @ z_s["joint"][0]) / tau
        expected = 0.0
        for s in (slice(0, 4), slice(4, 8), slice(8, 12)):
            q = float(relation_sets(z_s["joint"][:, s], bank[:1, s])[0, 0]
                      * relation_sets(z_t[:, s], bank[:1, s])[0, 0]) / tau
            expected += math.log((math.exp(p) + K * math.exp(q)) / (math.exp(p) + math.exp(q)))
        assert distill_loss_grad(z_t, z_s, bank, tau, 3)[0] == pytest.approx(expected, rel=1e-12)

    def test_bank_permutation_invariance(self, rng):
        z_t, z_s, bank = setup(rng)
        a = distill_loss_grad(z_t, z_s, bank, 0.07, 3)[0]
        b = distill_loss_grad(z_t, z_s, bank[rng.permutation(len(bank))], 0.07, 3)[0]
        assert a == pytest.approx(b, rel=1e-12)

    def test_sum_over_students(self, rng):
        z_t, z_s, bank = setup(rng)
        loss, _, terms = distill_loss_grad(z_t, z_s, bank, 0.07, 3)
        single = [distill_loss_grad(z_t, {u: z}, bank, 0.07, 3)[0] for u, z in z_s.items()]
        assert loss == pytest.approx(sum(single), rel=1e-13) and set(terms) == set(z_s)

    @pytest.mark.parametrize("exclude_j", [False, True])
    def test_gradient(self, rng, exclude_j):
        z_t, z_s, bank = setup(rng, students=("joint",))
        x = rng.normal(size=z_s["joint"].shape)
        _, grads, _ = distill_loss_grad(z_t, {"joint": x}, bank, 0.5, 3, exclude_j)
        num = numeric_grad(lambda y: distill_loss_grad(z_t, {"joint": y}, bank, 0.5, 3, exclude_j)[0], x)
        np.testing.assert_allclose(grads["joint"], num, rtol=1e-5, atol=1e-8)

    def test_gradient_vanishes_only_locally(self, rng):
        """A descent step along the negative gradient lowers the loss."""
        z_t, z_s, bank = setup(rng, students=("joint",))
        x = z_s["joint"]
        loss, grads, _ = distill_loss_grad(z_t, {"joint": x}, bank, 0.5, 3)
        after = distill_loss_grad(z_t, {"joint": x - 1e-3 * grads["joint"]}, bank, 0.5, 3)[0]
        assert after < loss

    def test_mask_equals_removal(self, rng):
        z_t, z_s, bank = setup(rng, B=1)
        mask = np.zeros((1, len(bank)), dtype=bool)
        mask[0, 2] = True
        a = distill_loss_grad(z_t, z_s, bank, 0.07, 3, exclude_mask=mask)[0]
        b = distill_loss_grad(z_t, z_s, np.delete(bank, 2, axis=0), 0.07, 3)[0]
        assert a == pytest.approx(b, rel=1e-12)

    def test_errors(self, rng):
        z_t, z_s, bank = setup(rng)
        with pytest.raises(ValueError, match="non-empty"):
            distill_loss_grad(z_t, z_s, bank[:0], 0.07, 3)
        with pytest.raises(ValueError, match="divisible"):
            distill_loss_grad(z_t, z_s, bank, 0.07, 5)
        with pytest.raises(ValueError, match="excluded"):
            distill_loss_grad(z_t, z_s, bank, 0.07, 3, exclude_mask=np.ones((3, len(bank)), dtype=bool))
        with pytest.raises(ValueError, match="shape"):
            distill_loss_grad(z_t, {"joint": z_t[:2]}, bank, 0.07, 3)


def test_moco_gradient(rng):
    z_t, _, bank = setup(rng)
    x = rng.normal(size=z_t.shape)
    loss, g = moco_grad(z_t, x, bank, 0.5)
    assert loss == pytest.approx(oracles.batch_info_nce(x.tolist(), z_t.tolist(), bank.tolist(), 0.5), rel=1e-12)
    np.testing.assert_allclose(g, numeric_grad(lambda y: moco_grad(z_t, y, bank, 0.5)[0], x), rtol=1e-5, atol=1e-8)


class TestTraining:
    def test_build_students(self, tiny_data):
        _, teacher = tiny_data
        students = build_students(teacher, DistillConfig(student_modalities=("joint", "motion", "bone")))
        assert students.modalities == ["joint", "motion", "bone"]
        assert all(st.arch.aux_dim == 6 * 4 for st in students.stacks.values())
        init = build_students(teacher, DistillConfig(student_modalities=("joint",)), init=teacher)
        assert np.array_equal(init.stacks["joint"].params["enc.l1.w"], teacher.stacks["joint"].params["enc.l1.w"])

    def test_one_epoch_leaves_teacher_untouched(self, tiny_data, ntu):
        data, teacher = tiny_data
        sub = data.subset(data.ids[:8])
        before = teacher.digest()
        res = distill_train(teacher, sub, ntu, DistillConfig(epochs=1, batch_size=4, seed=3))
        assert res.teacher_digest_before == res.teacher_digest_after == before == teacher.digest()
        assert len(res.metrics) == 1 and np.isfinite(res.metrics[0]["loss"])
        assert -1 <= res.metrics[0]["mean_cos_t_s"] <= 1
        assert len(res.bank) == 8

    def test_bank_holds_teacher_embeddings(self, tiny_data, ntu):
        data, teacher = tiny_data
        sub = data.subset(data.ids[:4])
        res = distill_train(teacher, sub, ntu, DistillConfig(epochs=1, batch_size=4))
        z = teacher_embed_arrays(teacher, clean_arrays(sub, ntu, teacher.modalities))
        assert np.array_equal(res.bank.entries, z)

    def test_deterministic(self, tiny_data, ntu):
        data, teacher = tiny_data
        sub = data.subset(data.ids[:4])
        a = distill_train(teacher, sub, ntu, DistillConfig(epochs=1, batch_size=4, seed=5))
        b = distill_train(teacher, sub, ntu, DistillConfig(epochs=1, batch_size=4, seed=5))
        assert a.metrics == b.metrics and a.students.digest() == b.students.digest()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DistillConfig(student_modalities=("rotation_axis",))
        with pytest.raises(ValueError):
            DistillConfig(tau=0)
