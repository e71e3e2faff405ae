import math

import numpy as np
import oracles
import pytest
from conftest import random_rotation
from hypothesis import given, settings
from hypothesis import strategies as st

from kinemod.modality import (
    ALL_MODALITIES,
    ModalityKind,
    ModalityTensor,
    acceleration_array,
    angular_velocity_array,
    derive_acceleration,
    derive_all,
    derive_angular_velocity,
    derive_arrays,
    derive_bones,
    derive_joint_angles,
    derive_motion,
    derive_rotation_axes,
    joint_angle_array,
    rotation_axis_array,
)
from kinemod.skeleton import SkeletonSequence, SkeletonTopology, default_topology


def scalar_track(values):
    v = np.asarray(values, dtype=float)
    return SkeletonSequence(np.broadcast_to(v[None, :, None], (3, len(v), 1)).copy(), original_frames=50)


# two-bone topology whose hinge at joint 0 is (bone 1, bone 2)
PAIR = SkeletonTopology(3, ((1, 0), (2, 0)), hinge_defs=((1, 2), (1, 2), (1, 2)))


def bones_from(bi, bj):
    """Bone tensor with b_1 = bi, b_2 = bj in a single frame."""
    b = np.zeros((3, 1, 3))
    b[:, 0, 1], b[:, 0, 2] = bi, bj
    return b


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300), initial=0.0))


class TestWorkedExamples:
    def test_motion(self):
        assert derive_motion(scalar_track([0, 1, 3])).data[0, :, 0].tolist() == [0, 1, 2]

    def test_constant_sequence_has_zero_motion(self, rng):
        x = np.repeat(rng.normal(size=(3, 1, 25)), 50, axis=1)
        assert not np.any(derive_motion(SkeletonSequence(x)).data)

    def test_uniform_motion_zero_acceleration(self):
        seq = scalar_track(0.3 * np.arange(50))
        np.testing.assert_allclose(derive_acceleration(seq, 1.0).data, 0.0, atol=1e-13)

    @pytest.mark.parametrize("gamma,expected", [(1.0, 2.0), (2.0, 0.5)])
    def test_quadratic_track(self, gamma, expected):
        a = derive_acceleration(scalar_track(np.arange(50.0) ** 2), gamma).data[0, :, 0]
        assert np.all(a[1:-1] == expected) and a[0] == 0 and a[-1] == 0

    def test_bone_difference(self):
        x = np.zeros((3, 1, 3))
        x[:, 0, 1] = (1, 2, 3)
        b = derive_bones(SkeletonSequence(x), PAIR).data
        assert b[:, 0, 1].tolist() == [1, 2, 3] and not np.any(b[:, :, 0])

    def test_coincident_joints_zero_bones(self, ntu):
        x = np.ones((3, 4, 25))
        assert not np.any(derive_bones(SkeletonSequence(x), ntu).data)

    @pytest.mark.parametrize("bi,bj,r", [
        ((1, 0, 0), (0, 1, 0), (0, 0, 1)),
        ((1, 0, 0), (2, 0, 0), (0, 0, 0)),
        ((1, 1, 0), (0, 0, 2), (1 / math.sqrt(2), -1 / math.sqrt(2), 0)),
    ])
    def test_rotation_axis(self, bi, bj, r):
        out = rotation_axis_array(bones_from(bi, bj), PAIR)[:, 0, 0]
        np.testing.assert_allclose(out, r, atol=1e-15)

    @pytest.mark.parametrize("bj,theta", [((0, 1, 0), math.pi / 2), ((1, 0, 0), 0.0), ((-1, 0, 0), math.pi)])
    def test_joint_angle(self, bj, theta):
        assert joint_angle_array(bones_from((1, 0, 0), bj), PAIR)[0, 0] == pytest.approx(theta, abs=1e-15)

    def test_zero_bone_gives_zero_angle_and_axis(self):
        b = bones_from((0, 0, 0), (1, 0, 0))
        assert joint_angle_array(b, PAIR)[0, 0] == 0.0
        assert not np.any(rotation_axis_array(b, PAIR))

    def test_angular_velocity_substitution(self):
        r = np.zeros((3, 5, 1))
        r[2] = 1.0
        theta = 0.1 * np.arange(5)[:, None]
        w = angular_velocity_array(r, theta, 1.0)
        np.testing.assert_allclose(w[2, :-1, 0], 0.1, rtol=1e-14)
        assert not np.any(w[:2]) and w[2, -1, 0] == 0.0

    def test_constant_angle_zero_velocity(self, rng):
        r = rng.normal(size=(3, 6, 4))
        assert not np.any(angular_velocity_array(r, np.full((6, 4), 0.7), 1.3))

    def test_static_pose(self, ntu, rng):
        seq = SkeletonSequence(np.repeat(rng.normal(size=(3, 1, 25)), 50, axis=1), original_frames=50)
        out = derive_all(seq, ntu)
        assert np.any(out[ModalityKind.JOINT].data) and np.any(out[ModalityKind.BONE].data)
        for k in (ModalityKind.MOTION, ModalityKind.ACCELERATION, ModalityKind.ANGULAR_VELOCITY):
            assert not np.any(out[k].data)


class TestContracts:
    def test_six_tensors_of_resized_shape(self, ntu, rng):
        out = derive_all(SkeletonSequence(rng.normal(size=(3, 50, 25)), original_frames=80), ntu)
        assert list(out) == list(ALL_MODALITIES)
        assert all(t.data.shape == (3, 50, 25) for t in out.values())

    def test_matches_standalone_ops(self, ntu, rng):
        seq = SkeletonSequence(rng.normal(size=(3, 50, 25)), original_frames=75)
        out = derive_all(seq, ntu)
        b = derive_bones(seq, ntu)
        r = derive_rotation_axes(b, ntu)
        assert np.array_equal(out[ModalityKind.MOTION].data, derive_motion(seq).data)
        assert np.array_equal(out[ModalityKind.BONE].data, b.data)
        assert np.array_equal(out[ModalityKind.ACCELERATION].data, derive_acceleration(seq, 1.5).data)
        assert np.array_equal(out[ModalityKind.ROTATION_AXIS].data, r.data)
        w = derive_angular_velocity(r, derive_joint_angles(b, ntu), 1.5)
        assert np.array_equal(out[ModalityKind.ANGULAR_VELOCITY].data, w.data)

    def test_axis_norms_are_one_or_zero(self, ntu, rng):
        x = rng.normal(size=(3, 50, 25))
        x[:, :, 5] = x[:, :, 4]  # a zero-length bone
        r = rotation_axis_array(derive_bones(SkeletonSequence(x), ntu).data, ntu)
        n = np.linalg.norm(r, axis=0)
        assert np.all((np.abs(n - 1) < 1e-12) | (n == 0)) and np.any(n == 0)

    def test_angles_in_range(self, ntu, rng):
        theta = joint_angle_array(derive_bones(SkeletonSequence(rng.normal(size=(3, 50, 25))), ntu).data, ntu)
        assert np.all((theta >= 0) & (theta <= math.pi))

    def test_body_axis_rides_along(self, ntu, rng):
        x = rng.normal(size=(3, 50, 25, 2))
        x[..., 1] = 0.0
        both = derive_arrays(x, 1.2, ntu)
        single = derive_arrays(x[..., 0], 1.2, ntu)
        for k in ALL_MODALITIES:
            assert np.array_equal(both[k][..., 0], single[k]) and not np.any(both[k][..., 1])

    def test_errors(self, ntu):
        with pytest.raises(ValueError):
            derive_motion(SkeletonSequence(np.zeros((3, 1, 25))))
        with pytest.raises(ValueError):
            derive_acceleration(SkeletonSequence(np.zeros((3, 2, 25))), 1.0)
        with pytest.raises(ValueError):
            acceleration_array(np.zeros((3, 5, 2)), 0.0)
        with pytest.raises(ValueError):
            derive_bones(SkeletonSequence(np.zeros((3, 5, 4))), ntu)
        with pytest.raises(ValueError, match="bone tensor"):
            derive_rotation_axes(ModalityTensor(ModalityKind.MOTION, np.zeros((3, 5, 25))), ntu)
        with pytest.raises(ValueError):
            angular_velocity_array(np.zeros((3, 5, 2)), np.zeros((5, 2)), -1.0)
        with pytest.raises(ValueError):
            ModalityKind.parse("velocity")


def test_oracle_agreement_small(ntu, rng):
    """A few sequences here; the acceptance suite runs the full 100-sequence sweep."""
    for gamma in (0.8, 2.0):
        x = rng.normal(size=(3, 50, 25))
        lib = derive_arrays(x, gamma, ntu)
        ref = oracles.all_modalities(x.tolist(), gamma, ntu.bone_pairs, ntu.hinge_defs)
        for k in ALL_MODALITIES:
            assert rel_err(lib[k], ref[k.value]) <= 1e-12, k


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_translation_and_rotation(seed):
    topo = default_topology()
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 20, 25))
    base = derive_arrays(x, 1.3, topo)
    shifted = derive_arrays(x + rng.normal(size=(3, 1, 1)) * 10, 1.3, topo)
    for k in ALL_MODALITIES[1:]:
        np.testing.assert_allclose(shifted[k], base[k], atol=1e-9, rtol=0)
    R = random_rotation(rng)
    rot = derive_arrays(np.einsum("ij,jtv->itv", R, x), 1.3, topo)
    for k in (ModalityKind.BONE, ModalityKind.ROTATION_AXIS, ModalityKind.ANGULAR_VELOCITY):
        np.testing.assert_allclose(rot[k], np.einsum("ij,jtv->itv", R, base[k]), atol=1e-9, rtol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 0.8, 1.0, 1.5, 2.0]))
def test_gamma_doubling(seed, gamma):
    topo = default_topology()
    x = np.random.default_rng(seed).normal(size=(3, 12, 25))
    a, b = derive_arrays(x, gamma, topo), derive_arrays(x, 2 * gamma, topo)
    np.testing.assert_allclose(b[ModalityKind.ACCELERATION], 0.25 * a[ModalityKind.ACCELERATION], rtol=1e-12, atol=0)
    np.testing.assert_allclose(b[ModalityKind.ANGULAR_VELOCITY], 0.5 * a[ModalityKind.ANGULAR_VELOCITY],
                               rtol=1e-12, atol=0)
