"""Relational teacher-to-student distillation across modalities.

A frozen multi-modality teacher fills a fully consistent bank with its
concatenated key embeddings. Each student modality owns an auxiliary head
whose normalized output lives in the teacher's concatenated space; it is
pulled toward the teacher embedding of the same sample while the per-slice
similarity relations to the bank negatives are matched to the teacher's.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import AugmentParams
from .bank import MemoryBank, as_negatives
from .dataio import SkeletonDataset
from .encoder import KEY_PREFIXES, EncoderStack, normalize, normalize_backward
from .engine import (
    SGD,
    MultiModalModel,
    TrainingDiverged,
    _names,
    clean_arrays,
    fit_norms,
    make_views,
    step_schedule,
)
from .modality import BASIC_MODALITIES, ModalityKind, derive_arrays
from .skeleton import RESAMPLED_FRAMES, SkeletonTopology

log = logging.getLogger(__name__)

DISTILL_FIELDS = ("epoch", "loss", "mean_cos_t_s")


@dataclass
class DistillConfig:
    epochs: int = 150
    batch_size: int = 128
    lr: float = 0.1
    lr_decay: float = 0.1
    lr_steps: tuple[int, ...] = ()
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    tau: float = 0.07
    student_modalities: tuple[str, ...] = tuple(k.value for k in BASIC_MODALITIES)
    # drop the mined entry j from the denominator as well as keeping it in the numerator
    exclude_j: bool = False
    # mask each anchor's own entry out of the consistent bank
    exclude_self: bool = True
    # weight of the MoCo-style InfoNCE pulling each student toward the teacher
    # embedding against the consistent bank; 0 trains on the relational loss alone
    moco_weight: float = 1.0
    shear: float = 0.5
    crop_min: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.student_modalities = _names(self.student_modalities)
        self.lr_steps = tuple(int(e) for e in self.lr_steps)
        basic = {k.value for k in BASIC_MODALITIES}
        if not set(self.student_modalities) <= basic:
            raise ValueError(f"student modalities must be drawn from {sorted(basic)}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def teacher_embed_arrays(teacher: MultiModalModel, arrays: dict[str, np.ndarray]) -> np.ndarray:
    """Concatenated, re-normalized key-encoder embeddings ``(B, n*c_z)``."""
    parts = [
        teacher.stacks[m].embed_batch(teacher.prepare(m, arrays[m]), "g", use_key=True)
        for m in teacher.modalities
    ]
    return normalize(np.concatenate(parts, axis=1))


def teacher_embed(teacher: MultiModalModel, sample, topo: SkeletonTopology) -> np.ndarray:
    arrays = derive_arrays(sample.data, sample.original_frames / RESAMPLED_FRAMES, topo)
    batch = {m: arrays[ModalityKind(m)][None] for m in teacher.modalities}
    return teacher_embed_arrays(teacher, batch)[0]


def _slices(width: int, n_teacher: int):
    if width % n_teacher:
        raise ValueError(f"embedding width {width} is not divisible by {n_teacher} teacher modalities")
    cz = width // n_teacher
    return [slice(v * cz, (v + 1) * cz) for v in range(n_teacher)]


def relation_sets(anchor_slice: np.ndarray, bank_slice: np.ndarray) -> np.ndarray:
    """Similarities between re-normalized slices: ``(B, c) x (K, c) -> (B, K)``."""
    return normalize(anchor_slice) @ normalize(bank_slice).T


def distill_loss_grad(
    z_t: np.ndarray,
    z_students: dict[str, np.ndarray],
    bank,
    tau: float = 0.07,
    n_teacher: int = 6,
    exclude_j: bool = False,
    exclude_mask: np.ndarray | None = None,
):
    """Sum over student u and teacher modality v of the batch-mean relational loss.

    With ``P = z_t . z_u / tau`` and relation logits ``q_i = s_i^u s_i^v / tau``
    the per-sample loss is ``-log((e^P + e^{q_j}) / (e^P + sum_i e^{q_i}))``
    where ``j = argmax_i s_i^v``. Returns ``(loss, {u: dL/dz_u}, terms)``.
    """
    negs = as_negatives(bank)
    if negs.shape[0] == 0:
        raise ValueError("distillation needs a non-empty consistent bank")
    if tau <= 0:
        raise ValueError("tau must be positive")
    z_t = np.atleast_2d(z_t)
    B, width = z_t.shape
    if negs.shape[1] != width:
        raise ValueError(f"bank width {negs.shape[1]} != teacher embedding width {width}")
    K = negs.shape[0]
    mask = np.zeros((B, K), dtype=bool) if exclude_mask is None else np.asarray(exclude_mask, dtype=bool)
    if mask.all(axis=1).any():
        raise ValueError("every bank entry is excluded for some anchor")
    sl = _slices(width, n_teacher)
    s_v = [relation_sets(z_t[:, s], negs[:, s]) for s in sl]
    bank_n = [normalize(negs[:, s]) for s in sl]
    rows = np.arange(B)
    terms, grads = {}, {}
    for u, z_u in z_students.items():
        z_u = np.atleast_2d(z_u)
        if z_u.shape != z_t.shape:
            raise ValueError(f"student {u} embedding shape {z_u.shape} != teacher {z_t.shape}")
        pos = np.sum(z_t * z_u, axis=1) / tau
        g_u = np.zeros_like(z_u)
        total_u = 0.0
        for v, s in enumerate(sl):
            su_hat = normalize(z_u[:, s])
            s_u = su_hat @ bank_n[v].T
            sv = np.where(mask, -np.inf, s_v[v])
            j = np.argmax(sv, axis=1)
            q = s_u * s_v[v] / tau
            q = np.where(mask, -np.inf, q)
            den_mask = ~mask
            if exclude_j:
                den_mask = den_mask.copy()
                den_mask[rows, j] = False
            top = np.maximum(pos, np.max(np.where(mask, -np.inf, q), axis=1))
            e_pos = np.exp(pos - top)
            e_q = np.where(~mask, np.exp(q - top[:, None]), 0.0)
            e_j = e_q[rows, j]
            num = e_pos + e_j
            den = e_pos + np.sum(np.where(den_mask, e_q, 0.0), axis=1)
            losses = np.log(den) - np.log(num)
            total_u += losses.mean()
            # d loss / d logits, per sample
            d_pos = e_pos / den - e_pos / num
            d_q = np.where(den_mask, e_q, 0.0) / den[:, None]
            d_q[rows, j] -= e_j / num
            g_u += d_pos[:, None] * z_t / tau / B
            d_su = (d_q * s_v[v] / tau) @ bank_n[v]
            g_u[:, s] += normalize_backward(z_u[:, s], d_su) / B
        terms[u] = float(total_u)
        grads[u] = g_u
    return float(sum(terms.values())), grads, terms


def moco_grad(z_t: np.ndarray, z_u: np.ndarray, bank, tau: float = 0.07, exclude_mask=None):
    """Batch-mean InfoNCE with ``z_t`` as positive and masked bank entries as negatives."""
    negs = as_negatives(bank)
    B = z_u.shape[0]
    logits = np.concatenate([np.sum(z_t * z_u, axis=1)[:, None], z_u @ negs.T], axis=1) / tau
    if exclude_mask is not None:
        logits[:, 1:] = np.where(exclude_mask, -np.inf, logits[:, 1:])
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    soft = e / e.sum(axis=1, keepdims=True)
    losses = -np.log(soft[:, 0])
    d = soft.copy()
    d[:, 0] -= 1.0
    grad = (d[:, :1] * z_t + d[:, 1:] @ negs) / tau / B
    return float(losses.mean()), grad


@dataclass
class DistillState:
    teacher: MultiModalModel
    students: MultiModalModel
    consistent_bank: MemoryBank
    tau: float = 0.07
    exclude_j: bool = False

    @property
    def n_teacher(self) -> int:
        return len(self.teacher.modalities)


def distill_loss(state: DistillState, batch: dict[str, np.ndarray], exclude_mask=None) -> float:
    """Loss for one batch of clean modality arrays keyed by modality name."""
    z_t = teacher_embed_arrays(state.teacher, batch)
    z_s = {
        u: st.embed_batch(state.students.prepare(u, batch[u]), "aux")
        for u, st in state.students.stacks.items()
    }
    loss, _, _ = distill_loss_grad(
        z_t, z_s, state.consistent_bank, state.tau, state.n_teacher, state.exclude_j, exclude_mask
    )
    return loss


@dataclass
class DistillResult:
    students: MultiModalModel
    metrics: list[dict]
    bank: MemoryBank
    teacher_digest_before: str = ""
    teacher_digest_after: str = ""


def build_students(teacher: MultiModalModel, config: DistillConfig, norms=None,
                   init: MultiModalModel | None = None) -> MultiModalModel:
    """Student stacks with fresh auxiliary heads.

    With ``init`` (a pretrained model covering the student modalities) the
    encoder and g head start from its query weights and its input norms are
    kept; otherwise encoders are freshly initialized and input norms come
    from the teacher, else from ``norms``.
    """
    t_arch = next(iter(teacher.stacks.values())).arch
    width = len(teacher.modalities) * t_arch.cz
    stacks = {}
    for i, u in enumerate(config.student_modalities):
        arch = type(t_arch)(**{**t_arch.__dict__, "n_modalities": 0, "aux_dim": width})
        stacks[u] = EncoderStack(arch, seed=config.seed * 1009 + 500 + i)
        if init is not None:
            if u not in init.stacks:
                raise ValueError(f"student initialization lacks modality {u!r}")
            src = init.stacks[u]
            for name, arr in src.params.items():
                if name.startswith(KEY_PREFIXES):
                    if stacks[u].params[name].shape != arr.shape:
                        raise ValueError(f"student initialization block {name} has shape {arr.shape}, "
                                         f"expected {stacks[u].params[name].shape}")
                    stacks[u].params[name][...] = arr
                    stacks[u].key[name][...] = arr
    norms = dict(norms or {})
    source = init.norms if init is not None else teacher.norms
    norms.update({u: source[u] for u in config.student_modalities if u in source})
    missing = [u for u in config.student_modalities if u not in norms]
    if missing:
        raise ValueError(f"no input normalization available for student modalities {missing}")
    return MultiModalModel(stacks, {u: norms[u] for u in stacks}, meta={"kind": "student", "modalities": list(stacks),
                                                 "teacher_modalities": teacher.modalities})


def _mean_cos(teacher, students, arrays) -> float:
    z_t = teacher_embed_arrays(teacher, arrays)
    cos = [np.sum(st.embed_batch(students.prepare(u, arrays[u]), "aux") * z_t, axis=1).mean()
           for u, st in students.stacks.items()]
    return float(np.mean(cos))


def distill_train(
    teacher: MultiModalModel,
    dataset: SkeletonDataset,
    topo: SkeletonTopology,
    config: DistillConfig,
    out_dir: str | Path | None = None,
    student_init: MultiModalModel | None = None,
) -> DistillResult:
    for st in teacher.stacks.values():
        st.freeze()
    digest0 = teacher.digest()
    rng = np.random.default_rng(config.seed)
    t_mods = teacher.modalities
    need = list(dict.fromkeys(list(t_mods) + list(config.student_modalities)))
    arrays = clean_arrays(dataset, topo, need)

    width = len(t_mods) * next(iter(teacher.stacks.values())).arch.cz
    bank = MemoryBank(len(dataset), width)
    bank.enqueue(teacher_embed_arrays(teacher, arrays), np.arange(len(dataset)))
    bank_ids = bank.ids

    extra = [u for u in config.student_modalities if u not in teacher.norms]
    students = build_students(teacher, config, fit_norms({u: arrays[u] for u in extra}, "center"), student_init)
    opts = {u: SGD(st.params, config.sgd_momentum, config.weight_decay) for u, st in students.stacks.items()}
    aug = AugmentParams(config.shear, config.crop_min)
    rows = []
    for epoch in range(config.epochs):
        lr = step_schedule(config.lr, epoch, config.epochs, config.lr_steps, config.lr_decay)
        t0 = time.perf_counter()
        total, steps = 0.0, 0
        perm = rng.permutation(len(dataset))
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            views = make_views(dataset, idx, topo, need, aug, rng)
            z_t = teacher_embed_arrays(teacher, views)
            caches, z_s = {}, {}
            for u, st in students.stacks.items():
                _, out, caches[u] = st.forward(students.prepare(u, views[u]), ("aux",))
                z_s[u] = out["aux"]
            mask = (bank_ids[None, :] == idx[:, None]) if config.exclude_self else None
            loss, grads, _ = distill_loss_grad(z_t, z_s, bank, config.tau, len(t_mods), config.exclude_j, mask)
            if config.moco_weight:
                for u in z_s:
                    l_m, g_m = moco_grad(z_t, z_s[u], bank, config.tau, mask)
                    loss += config.moco_weight * l_m
                    grads[u] = grads[u] + config.moco_weight * g_m
            if not np.isfinite(loss):
                ckpt = None
                if out_dir is not None:
                    ckpt = Path(out_dir) / "distill_diverged.ckpt"
                    students.save(ckpt)
                raise TrainingDiverged(f"non-finite distillation loss at epoch {epoch + 1}", ckpt)
            for u, st in students.stacks.items():
                opts[u].step(st.backward(caches[u], {"aux": grads[u]}), lr)
            total += loss
            steps += 1
        rows.append({"epoch": epoch + 1, "loss": total / steps,
                     "mean_cos_t_s": _mean_cos(teacher, students, arrays)})
        log.info("distill epoch %d loss %.4f (%.0f ms)", epoch + 1, rows[-1]["loss"],
                 (time.perf_counter() - t0) * 1000)
    return DistillResult(students, rows, bank, digest0, teacher.digest())
