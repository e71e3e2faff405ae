"""Two-stage multi-modality contrastive pretraining.

Stage 1 trains every modality on its own with InfoNCE against a per-modality
queue. Stage 2 switches to cross-modality positive mining (EKEM) plus the
concatenated-key objective (IKEM). Key encoders follow their query encoders
by exponential moving average, except the ones frozen for stage 2.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import AugmentParams, augment_array
from .bank import MemoryBank
from .dataio import SkeletonDataset
from .encoder import EncoderArch, EncoderStack, load_checkpoint, save_checkpoint
from .losses import BatchState, ekem_terms, ikem_terms, info_nce_grad
from .modality import ALL_MODALITIES, ModalityKind, derive_arrays
from .skeleton import RESAMPLED_FRAMES, SkeletonTopology

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "stage", "modality", "loss", "lr", "wall_ms")
INPUT_NORMS = ("none", "rms", "center", "standardize")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        self.checkpoint = checkpoint
        super().__init__(message if checkpoint is None else f"{message} (state saved to {checkpoint})")


def _names(mods) -> tuple[str, ...]:
    return tuple(ModalityKind.parse(m).value if isinstance(m, str) else ModalityKind(m).value for m in mods)


@dataclass
class TrainConfig:
    tau: float = 0.07
    bank_capacity: int = 2048
    batch_size: int = 128
    stage1_epochs: int = 150
    stage2_epochs: int = 150
    lr: float = 0.1
    lr_decay: float = 0.1
    # epochs at which lr is multiplied by lr_decay; empty -> 5/6 of the run
    lr_steps: tuple[int, ...] = ()
    momentum: float = 0.999
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    freeze_high_perf: tuple[str, ...] = ("joint", "bone", "rotation_axis")
    shear: float = 0.5
    crop_min: float = 0.5
    topk: int = 1
    ekem_weight: float = 1.0
    ikem_weight: float = 1.0
    modalities: tuple[str, ...] = tuple(k.value for k in ALL_MODALITIES)
    hidden: int = 64
    feature_dim: int = 64
    head_hidden: int = 64
    cz: int = 128
    activation: str = "relu"
    # input scaling fitted on augmented views: none | rms | center | standardize
    input_norm: str = "center"
    record_wall_time: bool = False
    seed: int = 0

    def __post_init__(self):
        self.modalities = _names(self.modalities)
        self.freeze_high_perf = _names(self.freeze_high_perf)
        self.lr_steps = tuple(int(e) for e in self.lr_steps)
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"key momentum must lie in [0, 1], got {self.momentum}")
        if self.bank_capacity < 1 or self.batch_size < 1:
            raise ValueError("bank_capacity and batch_size must be positive")
        if not self.modalities:
            raise ValueError("at least one modality is required")
        if self.input_norm not in INPUT_NORMS:
            raise ValueError(f"input_norm must be one of {INPUT_NORMS}, got {self.input_norm!r}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError(f"duplicate modalities in {self.modalities}")

    @property
    def total_epochs(self) -> int:
        return self.stage1_epochs + self.stage2_epochs

    def arch(self, joints: int, n_modalities: int | None = None, aux_dim: int = 0) -> EncoderArch:
        return EncoderArch(
            joints=joints, frames=RESAMPLED_FRAMES, hidden=self.hidden, feature_dim=self.feature_dim,
            head_hidden=self.head_hidden, cz=self.cz,
            n_modalities=len(self.modalities) if n_modalities is None else n_modalities,
            aux_dim=aux_dim, activation=self.activation, head_activation=self.activation,
        )

    def to_dict(self) -> dict:
        return asdict(self)


def step_schedule(base_lr: float, epoch: int, total: int, steps: Sequence[int] = (), decay: float = 0.1) -> float:
    """Piecewise-constant lr: multiplied by ``decay`` at each epoch in ``steps``
    (default: once, at 5/6 of ``total``)."""
    if not steps:
        steps = (int(round(total * 5 / 6)),) if total > 1 else ()
    return base_lr * decay ** sum(epoch >= s for s in steps)


class SGD:
    """Heavy-ball momentum with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict[str, np.ndarray], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        for name, p in self.params.items():
            g = grads[name] + self.weight_decay * p
            b = self.buf[name]
            b *= self.momentum
            b += g
            p -= lr * b


@dataclass
class InputNorm:
    """Per-(channel, joint) standardization fitted over a dataset, like an input BatchNorm."""

    mean: np.ndarray  # (C, V)
    std: np.ndarray  # (C, V)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 2:
            raise ValueError("input norm mean/std must both be (C, V)")
        if np.any(self.std <= 0):
            raise ValueError("input norm std must be positive")

    @classmethod
    def identity(cls, channels: int, joints: int) -> "InputNorm":
        return cls(np.zeros((channels, joints)), np.ones((channels, joints)))

    @classmethod
    def fit(cls, x: np.ndarray, mode: str = "rms") -> "InputNorm":
        """Fit on ``(N, C, T, V[, M])``.

        ``rms`` divides the whole stream by one RMS value; ``center`` removes the
        per-(channel, joint) mean and then divides by the RMS of the residual;
        ``standardize`` centres and scales every (channel, joint) on its own.
        """
        C, V = x.shape[1], x.shape[3]
        if mode == "none":
            return cls.identity(C, V)
        if mode == "rms":
            rms = float(np.sqrt(np.mean(x * x)))
            return cls(np.zeros((C, V)), np.full((C, V), rms if rms > 1e-12 else 1.0))
        axes = (0, 2) if x.ndim == 4 else (0, 2, 4)
        if mode == "center":
            mean = x.mean(axis=axes)
            m = mean[:, None, :, None] if x.ndim == 5 else mean[:, None, :]
            rms = float(np.sqrt(np.mean((x[None] - m[None]) ** 2)))
            return cls(mean, np.full((C, V), rms if rms > 1e-12 else 1.0))
        if mode == "standardize":
            std = x.std(axis=axes)
            return cls(x.mean(axis=axes), np.where(std > 1e-8, std, 1.0))
        raise ValueError(f"unknown input normalization {mode!r}; expected one of {INPUT_NORMS}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        m, s = self.mean[:, None, :], self.std[:, None, :]
        if x.ndim == 5:
            m, s = m[..., None], s[..., None]
        return (x - m) / s

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


@dataclass
class MultiModalModel:
    """Per-modality encoder stacks plus the input standardization of each stream."""

    stacks: dict[str, EncoderStack]
    norms: dict[str, InputNorm]
    meta: dict = field(default_factory=dict)

    @property
    def modalities(self) -> list[str]:
        return list(self.stacks)

    def prepare(self, modality: str, x: np.ndarray) -> np.ndarray:
        return self.norms[modality].apply(x)

    def features(self, arrays: dict[str, np.ndarray], use_key: bool = False) -> dict[str, np.ndarray]:
        return {m: s.encode_batch(self.prepare(m, arrays[m]), use_key) for m, s in self.stacks.items()}

    def save(self, path: str | Path) -> None:
        meta = dict(self.meta)
        meta["input_norms"] = {m: self.norms[m].to_dict() for m in self.stacks}
        save_checkpoint(path, self.stacks, meta)

    @classmethod
    def load(cls, path: str | Path) -> "MultiModalModel":
        stacks, meta = load_checkpoint(path)
        raw = meta.pop("input_norms", None) or {}
        norms = {}
        for m, st in stacks.items():
            norms[m] = InputNorm(**raw[m]) if m in raw else InputNorm.identity(st.arch.channels, st.arch.joints)
        return cls(stacks, norms, meta)

    def digest(self) -> str:
        h = hashlib.sha256()
        for m in self.stacks:
            h.update(self.stacks[m].digest().encode())
            h.update(self.norms[m].mean.tobytes() + self.norms[m].std.tobytes())
        return h.hexdigest()


# -- views --------------------------------------------------------------------------

def clean_arrays(dataset: SkeletonDataset, topo: SkeletonTopology, modalities: Sequence[str]) -> dict[str, np.ndarray]:
    """Un-augmented modality stacks ``(N, 3, T, V[, M])`` for the whole dataset."""
    per = [derive_arrays(s.data, s.original_frames / RESAMPLED_FRAMES, topo) for s in dataset.sequences]
    return {m: np.stack([p[ModalityKind(m)] for p in per]) for m in modalities}


def make_views(dataset: SkeletonDataset, idx, topo, modalities, params: AugmentParams, rng):
    out = {m: [] for m in modalities}
    for i in idx:
        seq = dataset.sequences[i]
        x, frames = augment_array(seq.data, seq.original_frames, params, rng)
        arrays = derive_arrays(x, frames / RESAMPLED_FRAMES, topo)
        for m in modalities:
            out[m].append(arrays[ModalityKind(m)])
    return {m: np.stack(v) for m, v in out.items()}


def augmented_arrays(dataset: SkeletonDataset, topo, modalities, params: AugmentParams, seed: int):
    """One augmented view per sample, from a generator separate from the training stream.

    Input statistics are fitted on these so that they match what the encoders
    see during training, as a batch-statistics input norm would.
    """
    rng = np.random.default_rng([seed, 0x4E4F524D])
    return make_views(dataset, np.arange(len(dataset)), topo, modalities, params, rng)


def fit_norms(arrays: dict[str, np.ndarray], mode: str = "rms") -> dict[str, InputNorm]:
    return {m: InputNorm.fit(a, mode) for m, a in arrays.items()}


def metrics_csv(rows: Sequence[dict], columns: Sequence[str] = METRIC_FIELDS) -> str:
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return out.getvalue()


# -- pretraining --------------------------------------------------------------------

@dataclass
class PretrainResult:
    model: MultiModalModel
    metrics: list[dict]
    banks: dict[str, MemoryBank]
    bank_c: MemoryBank


def _stack_seed(seed: int, i: int) -> int:
    return seed * 1009 + i


def pretrain(
    dataset: SkeletonDataset,
    topo: SkeletonTopology,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> PretrainResult:
    if len(dataset) == 0:
        raise ValueError("cannot pretrain on an empty dataset")
    mods = list(config.modalities)
    n = len(mods)
    rng = np.random.default_rng(config.seed)
    arch = config.arch(topo.joint_count, n)
    stacks = {m: EncoderStack(arch, seed=_stack_seed(config.seed, i)) for i, m in enumerate(mods)}
    aug = AugmentParams(config.shear, config.crop_min)
    model = MultiModalModel(
        stacks, fit_norms(augmented_arrays(dataset, topo, mods, aug, config.seed), config.input_norm),
        meta={"kind": "pretrain", "modalities": mods, "seed": config.seed},
    )
    banks = {m: MemoryBank(config.bank_capacity, arch.cz) for m in mods}
    bank_c = MemoryBank(config.bank_capacity, n * arch.cz)
    opts = {m: SGD(stacks[m].params, config.sgd_momentum, config.weight_decay) for m in mods}
    frozen_keys = [m for m in mods if m in config.freeze_high_perf]
    ids = np.arange(len(dataset))
    rows: list[dict] = []

    for epoch in range(config.total_epochs):
        stage = 1 if epoch < config.stage1_epochs else 2
        lr = step_schedule(config.lr, epoch, config.total_epochs, config.lr_steps, config.lr_decay)
        t0 = time.perf_counter()
        sums = {m: 0.0 for m in mods}
        steps = 0
        perm = rng.permutation(len(dataset))
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start:start + config.batch_size]
            q_views = make_views(dataset, idx, topo, mods, aug, rng)
            k_views = make_views(dataset, idx, topo, mods, aug, rng)
            heads = ("g",) if stage == 1 else ("g", "gt")
            caches, batch = {}, BatchState({}, {}, {}, ids[idx])
            for m in mods:
                _, out, caches[m] = stacks[m].forward(model.prepare(m, q_views[m]), heads)
                batch.z[m] = out["g"]
                if stage == 2:
                    batch.z_tilde[m] = out["gt"]
                batch.z_key[m] = stacks[m].embed_batch(model.prepare(m, k_views[m]), "g", use_key=True)

            d_heads = {m: {} for m in mods}
            if stage == 1:
                for m in mods:
                    loss, d_heads[m]["g"] = info_nce_grad(batch.z[m], batch.z_key[m], banks[m], config.tau)
                    sums[m] += loss
            else:
                ekem, g_ekem, _ = ekem_terms(batch, banks, config.tau, config.topk)
                ikem, g_ikem = ikem_terms(batch, bank_c, config.tau)
                for m in mods:
                    sums[m] += config.ekem_weight * ekem[m] + config.ikem_weight * ikem[m]
                    d_heads[m]["g"] = config.ekem_weight * g_ekem[m]
                    d_heads[m]["gt"] = config.ikem_weight * g_ikem[m]
            if not all(np.isfinite(v) for v in sums.values()):
                ckpt = None
                if out_dir is not None:
                    ckpt = Path(out_dir) / "diverged.ckpt"
                    model.save(ckpt)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, stage {stage}", ckpt)
            for m in mods:
                opts[m].step(stacks[m].backward(caches[m], d_heads[m]), lr)
            for m in mods:
                banks[m].enqueue(batch.z_key[m], batch.ids)
            bank_c.enqueue(batch.z_c, batch.ids)
            for m in mods:
                if stage == 2 and m in frozen_keys:
                    continue
                stacks[m].momentum_update(config.momentum)
            steps += 1
        wall = int(round((time.perf_counter() - t0) * 1000)) if config.record_wall_time else ""
        for m in mods:
            rows.append({"epoch": epoch + 1, "stage": stage, "modality": m,
                         "loss": sums[m] / steps, "lr": lr, "wall_ms": wall})
        rows.append({"epoch": epoch + 1, "stage": stage, "modality": "all",
                     "loss": sum(sums.values()) / steps, "lr": lr, "wall_ms": wall})
        log.info("epoch %d stage %d loss %.4f", epoch + 1, stage, rows[-1]["loss"])
    return PretrainResult(model, rows, banks, bank_c)
