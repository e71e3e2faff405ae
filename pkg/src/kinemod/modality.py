"""The six per-sample modality streams derived from a resized skeleton sequence."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .skeleton import SkeletonSequence, SkeletonTopology, TimeScale, time_scale

EPS = 1e-8


class ModalityKind(str, enum.Enum):
    JOINT = "joint"
    MOTION = "motion"
    BONE = "bone"
    ACCELERATION = "acceleration"
    ROTATION_AXIS = "rotation_axis"
    ANGULAR_VELOCITY = "angular_velocity"

    @classmethod
    def parse(cls, name: str) -> "ModalityKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown modality {name!r}; expected one of {valid}") from None


ALL_MODALITIES = tuple(ModalityKind)
BASIC_MODALITIES = (ModalityKind.JOINT, ModalityKind.MOTION, ModalityKind.BONE)


@dataclass(frozen=True)
class ModalityTensor:
    kind: ModalityKind
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim not in (3, 4) or arr.shape[0] != 3:
            raise ValueError(f"modality data must be (3, T, V[, M]), got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "kind", ModalityKind(self.kind))
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class JointAngleTrack:
    """Hinge angles in radians, shape ``(T, V[, M])``."""

    theta: np.ndarray

    def __post_init__(self):
        arr = np.array(self.theta, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "theta", arr)


# -- array kernels ----------------------------------------------------------

def motion_array(x: np.ndarray) -> np.ndarray:
    if x.shape[1] < 2:
        raise ValueError(f"motion needs at least 2 frames, got {x.shape[1]}")
    m = np.zeros_like(x)
    m[:, 1:] = x[:, 1:] - x[:, :-1]
    return m


def acceleration_array(m: np.ndarray, gamma: float) -> np.ndarray:
    if m.shape[1] < 3:
        raise ValueError(f"acceleration needs at least 3 frames, got {m.shape[1]}")
    if not gamma > 0:
        raise ValueError(f"time scale must be positive, got {gamma}")
    a = np.zeros_like(m)
    # m[:, 0] is padding, so the first defined difference is at t = 1
    a[:, 1:-1] = (m[:, 2:] / gamma - m[:, 1:-1] / gamma) / gamma
    return a


def bone_array(x: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    if x.shape[2] != topo.joint_count:
        raise ValueError(
            f"sequence has {x.shape[2]} joints but topology {topo.name or ''} has {topo.joint_count}"
        )
    child = np.array([c for c, _ in topo.bone_pairs], dtype=np.int64)
    parent = np.array([p for _, p in topo.bone_pairs], dtype=np.int64)
    b = np.zeros_like(x)
    b[:, :, child] = x[:, :, child] - x[:, :, parent]
    return b


def _hinge_bones(b: np.ndarray, topo: SkeletonTopology):
    if b.shape[2] != topo.joint_count:
        raise ValueError(f"bone tensor has {b.shape[2]} channels, topology has {topo.joint_count}")
    hi = np.array([i for i, _ in topo.hinge_defs], dtype=np.int64)
    hj = np.array([j for _, j in topo.hinge_defs], dtype=np.int64)
    return b[:, :, hi], b[:, :, hj]


def _norm3(v: np.ndarray) -> np.ndarray:
    return np.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])


def rotation_axis_array(b: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    bi, bj = _hinge_bones(b, topo)
    c = np.stack(
        [
            bi[1] * bj[2] - bi[2] * bj[1],
            bi[2] * bj[0] - bi[0] * bj[2],
            bi[0] * bj[1] - bi[1] * bj[0],
        ]
    )
    n = _norm3(c)
    ok = n >= EPS
    return np.where(ok, c / np.where(ok, n, 1.0), 0.0)


# libm acos is almost always correctly rounded, where numpy's vectorized arccos is
# often one ulp off; angle differences feed angular velocity, which amplifies that ulp
_acos_ufunc = np.frompyfunc(math.acos, 1, 1)


def _arccos(x: np.ndarray) -> np.ndarray:
    return np.asarray(_acos_ufunc(x), dtype=np.float64)


def joint_angle_array(b: np.ndarray, topo: SkeletonTopology) -> np.ndarray:
    bi, bj = _hinge_bones(b, topo)
    dot = bi[0] * bj[0] + bi[1] * bj[1] + bi[2] * bj[2]
    ni, nj = _norm3(bi), _norm3(bj)
    ok = (ni >= EPS) & (nj >= EPS)
    cos = np.where(ok, dot / np.where(ok, ni * nj, 1.0), 1.0)
    return np.where(ok, _arccos(np.clip(cos, -1.0, 1.0)), 0.0)


def angular_velocity_array(r: np.ndarray, theta: np.ndarray, gamma: float) -> np.ndarray:
    if not gamma > 0:
        raise ValueError(f"time scale must be positive, got {gamma}")
    if r.shape[1:] != theta.shape:
        raise ValueError(f"axis shape {r.shape} does not match angle shape {theta.shape}")
    w = np.zeros_like(r)
    w[:, :-1] = r[:, :-1] * ((theta[1:] - theta[:-1]) / gamma)
    return w


# -- typed operations -------------------------------------------------------

def _gamma(g) -> float:
    return g.gamma if isinstance(g, TimeScale) else float(g)


def derive_motion(seq: SkeletonSequence) -> ModalityTensor:
    return ModalityTensor(ModalityKind.MOTION, motion_array(seq.data))


def derive_acceleration(seq: SkeletonSequence, gamma: TimeScale | float) -> ModalityTensor:
    g = _gamma(gamma)
    if seq.frames < 3:
        raise ValueError(f"acceleration needs at least 3 frames, got {seq.frames}")
    return ModalityTensor(ModalityKind.ACCELERATION, acceleration_array(motion_array(seq.data), g))


def derive_bones(seq: SkeletonSequence, topo: SkeletonTopology) -> ModalityTensor:
    return ModalityTensor(ModalityKind.BONE, bone_array(seq.data, topo))


def _require(t: ModalityTensor, kind: ModalityKind) -> None:
    if t.kind is not kind:
        raise ValueError(f"expected a {kind.value} tensor, got {t.kind.value}")


def derive_rotation_axes(bones: ModalityTensor, topo: SkeletonTopology) -> ModalityTensor:
    _require(bones, ModalityKind.BONE)
    return ModalityTensor(ModalityKind.ROTATION_AXIS, rotation_axis_array(bones.data, topo))


def derive_joint_angles(bones: ModalityTensor, topo: SkeletonTopology) -> JointAngleTrack:
    _require(bones, ModalityKind.BONE)
    return JointAngleTrack(joint_angle_array(bones.data, topo))


def derive_angular_velocity(
    axes: ModalityTensor, angles: JointAngleTrack, gamma: TimeScale | float
) -> ModalityTensor:
    _require(axes, ModalityKind.ROTATION_AXIS)
    return ModalityTensor(
        ModalityKind.ANGULAR_VELOCITY,
        angular_velocity_array(axes.data, angles.theta, _gamma(gamma)),
    )


def derive_arrays(x: np.ndarray, gamma: float, topo: SkeletonTopology) -> dict[ModalityKind, np.ndarray]:
    """All six streams as plain arrays; the hot path used during training."""
    m = motion_array(x)
    b = bone_array(x, topo)
    r = rotation_axis_array(b, topo)
    theta = joint_angle_array(b, topo)
    return {
        ModalityKind.JOINT: np.array(x, dtype=np.float64, copy=True),
        ModalityKind.MOTION: m,
        ModalityKind.BONE: b,
        ModalityKind.ACCELERATION: acceleration_array(m, gamma),
        ModalityKind.ROTATION_AXIS: r,
        ModalityKind.ANGULAR_VELOCITY: angular_velocity_array(r, theta, gamma),
    }


def derive_all(seq: SkeletonSequence, topo: SkeletonTopology) -> dict[ModalityKind, ModalityTensor]:
    """Six modality tensors, keyed and ordered as ``ALL_MODALITIES``."""
    if seq.frames < 3:
        raise ValueError(f"derive_all needs at least 3 frames, got {seq.frames}")
    arrays = derive_arrays(seq.data, time_scale(seq).gamma, topo)
    return {k: ModalityTensor(k, arrays[k]) for k in ALL_MODALITIES}
