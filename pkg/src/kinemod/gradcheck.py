"""Finite-difference checks of every training loss through the reference encoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import MemoryBank
from .distill import distill_loss_grad
from .encoder import EncoderArch, EncoderStack, GradCheckReport, grad_check, normalize
from .losses import BatchState, ekem_terms, ikem_terms, info_nce_grad, mine_positives

LOSSES = ("info_nce", "ikem", "ekem", "distill")


@dataclass(frozen=True)
class SuiteSpec:
    batch: int = 4
    bank: int = 8
    n_modalities: int = 3
    n_teacher: int = 6
    joints: int = 25
    frames: int = 12
    hidden: int = 16
    feature_dim: int = 16
    head_hidden: int = 16
    cz: int = 8
    activation: str = "relu"
    tau: float = 0.07
    topk: int = 2
    n_coords: int = 200
    tolerance: float = 1e-4
    seed: int = 0


def _arch(spec: SuiteSpec, n_modalities: int, aux_dim: int = 0) -> EncoderArch:
    return EncoderArch(
        joints=spec.joints, frames=spec.frames, hidden=spec.hidden, feature_dim=spec.feature_dim,
        head_hidden=spec.head_hidden, cz=spec.cz, n_modalities=n_modalities, aux_dim=aux_dim,
        activation=spec.activation, head_activation=spec.activation,
    )


def _combined(stacks: dict[str, EncoderStack]) -> dict[str, np.ndarray]:
    """One flat view over several stacks; arrays are shared, not copied."""
    return {f"{m}/{k}": v for m, st in stacks.items() for k, v in st.params.items()}


def _flatten(grads: dict[str, dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    return {f"{m}/{k}": v for m, g in grads.items() for k, v in g.items()}


def _unit_rows(rng, rows: int, width: int) -> np.ndarray:
    return normalize(rng.normal(size=(rows, width)))


def _inputs(rng, spec: SuiteSpec) -> np.ndarray:
    return rng.normal(size=(spec.batch, 3, spec.frames, spec.joints))


def check_info_nce(spec: SuiteSpec = SuiteSpec()) -> GradCheckReport:
    rng = np.random.default_rng(spec.seed)
    st = EncoderStack(_arch(spec, 1), seed=spec.seed)
    xq, xk = _inputs(rng, spec), _inputs(rng, spec)
    z_key = st.embed_batch(xk, "g", use_key=True)
    bank = _unit_rows(rng, spec.bank, spec.cz)

    def loss_fn():
        _, out, cache = st.forward(xq, ("g",))
        loss, g = info_nce_grad(out["g"], z_key, bank, spec.tau)
        return loss, st.backward(cache, {"g": g})

    return grad_check(st, loss_fn, spec.tolerance, spec.n_coords, seed=spec.seed)


def _modality_stacks(spec: SuiteSpec, rng):
    names = [f"m{i}" for i in range(spec.n_modalities)]
    arch = _arch(spec, spec.n_modalities)
    stacks = {m: EncoderStack(arch, seed=spec.seed * 31 + i) for i, m in enumerate(names)}
    xq = {m: _inputs(rng, spec) for m in names}
    z_key = {m: stacks[m].embed_batch(_inputs(rng, spec), "g", use_key=True) for m in names}
    return names, stacks, xq, z_key


def check_ikem(spec: SuiteSpec = SuiteSpec()) -> GradCheckReport:
    rng = np.random.default_rng(spec.seed + 1)
    names, stacks, xq, z_key = _modality_stacks(spec, rng)
    bank_c = _unit_rows(rng, spec.bank, spec.n_modalities * spec.cz)

    def loss_fn():
        batch = BatchState({}, {}, dict(z_key))
        caches = {}
        for m in names:
            _, out, caches[m] = stacks[m].forward(xq[m], ("g", "gt"))
            batch.z[m], batch.z_tilde[m] = out["g"], out["gt"]
        terms, grads = ikem_terms(batch, bank_c, spec.tau)
        return sum(terms.values()), _flatten({m: stacks[m].backward(caches[m], {"gt": grads[m]}) for m in names})

    return grad_check(_combined(stacks), loss_fn, spec.tolerance, spec.n_coords, seed=spec.seed)


def check_ekem(spec: SuiteSpec = SuiteSpec()) -> GradCheckReport:
    """Mined positives are a stop-gradient selection, so they are pinned at the check point."""
    rng = np.random.default_rng(spec.seed + 2)
    names, stacks, xq, z_key = _modality_stacks(spec, rng)
    banks = {m: _unit_rows(rng, spec.bank, spec.cz) for m in names}
    z0 = {m: stacks[m].embed_batch(xq[m]) for m in names}
    mined = {(u, v): mine_positives(z0[v], banks[v], spec.topk, spec.tau)
             for u in names for v in names if u != v}

    def loss_fn():
        batch = BatchState({}, {}, dict(z_key))
        caches = {}
        for m in names:
            _, out, caches[m] = stacks[m].forward(xq[m], ("g",))
            batch.z[m] = out["g"]
        terms, grads, _ = ekem_terms(batch, banks, spec.tau, spec.topk, mined)
        return sum(terms.values()), _flatten({m: stacks[m].backward(caches[m], {"g": grads[m]}) for m in names})

    return grad_check(_combined(stacks), loss_fn, spec.tolerance, spec.n_coords, seed=spec.seed)


def check_distill(spec: SuiteSpec = SuiteSpec()) -> GradCheckReport:
    rng = np.random.default_rng(spec.seed + 3)
    width = spec.n_teacher * spec.cz
    teacher = [EncoderStack(_arch(spec, spec.n_teacher), seed=100 + i) for i in range(spec.n_teacher)]
    x = {f"s{i}": _inputs(rng, spec) for i in range(3)}
    z_t = normalize(np.concatenate([t.embed_batch(x["s0"], "g", use_key=True) for t in teacher], axis=1))
    bank = MemoryBank(spec.bank, width)
    bank.enqueue(_unit_rows(rng, spec.bank, width))
    arch = _arch(spec, 0, aux_dim=width)
    students = {u: EncoderStack(arch, seed=200 + i) for i, u in enumerate(x)}

    def loss_fn():
        caches, z_s = {}, {}
        for u, st in students.items():
            _, out, caches[u] = st.forward(x[u], ("aux",))
            z_s[u] = out["aux"]
        loss, grads, _ = distill_loss_grad(z_t, z_s, bank, spec.tau, spec.n_teacher)
        return loss, _flatten({u: students[u].backward(caches[u], {"aux": grads[u]}) for u in students})

    return grad_check(_combined(students), loss_fn, spec.tolerance, spec.n_coords, seed=spec.seed)


CHECKS = {"info_nce": check_info_nce, "ikem": check_ikem, "ekem": check_ekem, "distill": check_distill}


def run_suite(spec: SuiteSpec = SuiteSpec(), losses=LOSSES) -> dict[str, GradCheckReport]:
    return {name: CHECKS[name](spec) for name in losses}
