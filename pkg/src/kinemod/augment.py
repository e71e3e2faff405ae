"""Minimal view augmentation: random shear, then random temporal crop-and-resize."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .skeleton import SkeletonSequence, resize_array


@dataclass(frozen=True)
class AugmentParams:
    shear: float = 0.5  # off-diagonal shear coefficients ~ U(-shear, shear)
    crop_min: float = 0.5  # crop ratio ~ U(crop_min, 1)

    def __post_init__(self):
        if self.shear < 0:
            raise ValueError("shear amplitude must be non-negative")
        if not 0.0 < self.crop_min <= 1.0:
            raise ValueError("crop_min must lie in (0, 1]")


IDENTITY = AugmentParams(shear=0.0, crop_min=1.0)


def shear_matrix(rng: np.random.Generator, amplitude: float) -> np.ndarray:
    s = np.eye(3)
    if amplitude > 0:
        off = rng.uniform(-amplitude, amplitude, size=6)
        s[~np.eye(3, dtype=bool)] = off
    return s


def augment_array(x: np.ndarray, original_frames: int, params: AugmentParams, rng: np.random.Generator):
    """Return the augmented coordinates and the crop-adjusted original frame count.

    A crop of ``L`` out of ``T`` frames stretched back to ``T`` frames plays
    the motion faster, so the pre-resampling length shrinks by ``L / T``.
    """
    S = shear_matrix(rng, params.shear)
    out = np.tensordot(S, x, axes=(1, 0)) if params.shear > 0 else np.array(x, dtype=np.float64)
    T = x.shape[1]
    ratio = rng.uniform(params.crop_min, 1.0) if params.crop_min < 1.0 else 1.0
    length = min(T, max(2, int(round(ratio * T))))
    if length < T:
        start = int(rng.integers(0, T - length + 1))
        out = resize_array(out[:, start:start + length], T)
        original_frames = max(2, int(round(original_frames * length / T)))
    return out, original_frames


def apply_augmentation(seq: SkeletonSequence, params: AugmentParams = AugmentParams(), seed=None) -> SkeletonSequence:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    original = seq.original_frames if seq.original_frames is not None else seq.frames
    data, frames = augment_array(seq.data, original, params, rng)
    return seq.replace(data=data, original_frames=frames)
