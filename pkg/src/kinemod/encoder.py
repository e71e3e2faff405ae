"""Per-modality encoder, projection heads and momentum key copy.

The reference backbone flattens each frame (and body) to a ``C*V`` row,
applies an affine map and a nonlinearity, mean-pools the rows and applies a
second affine map. Heads are two-layer MLPs followed by L2 normalization.
Gradients are hand-derived; everything runs in float64 numpy.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

NORM_EPS = 1e-12
CKPT_MAGIC = "KINEMOD-CKPT"
CKPT_VERSION = 1

GradientSet = dict[str, np.ndarray]

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "relu": (lambda z: np.maximum(z, 0.0), lambda y: (y > 0).astype(y.dtype)),
    "identity": (lambda z: z, lambda y: np.ones_like(y)),
}


def _act(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(_ACTIVATIONS)}") from None


@dataclass(frozen=True)
class EncoderArch:
    joints: int = 25
    frames: int = 50
    channels: int = 3
    hidden: int = 64
    feature_dim: int = 64
    head_hidden: int = 64
    cz: int = 128
    n_modalities: int = 1
    aux_dim: int = 0
    activation: str = "relu"
    head_activation: str = "relu"

    @property
    def row_width(self) -> int:
        return self.channels * self.joints

    def head_width(self, head: str) -> int:
        return {"g": self.cz, "gt": self.n_modalities * self.cz, "aux": self.aux_dim}[head]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EncoderArch":
        return cls(**json.loads(text))


HEADS = ("g", "gt", "aux")
# blocks mirrored by the momentum (key) encoder
KEY_PREFIXES = ("enc.", "g.")


def init_params(arch: EncoderArch, rng: np.random.Generator) -> dict[str, np.ndarray]:
    def dense(name, fan_in, fan_out, out):
        bound = 1.0 / np.sqrt(fan_in)
        out[f"{name}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        out[f"{name}.b"] = rng.uniform(-bound, bound, size=fan_out)

    p: dict[str, np.ndarray] = {}
    dense("enc.l1", arch.row_width, arch.hidden, p)
    dense("enc.l2", arch.hidden, arch.feature_dim, p)
    for head in HEADS:
        width = arch.head_width(head)
        if width > 0:
            dense(f"{head}.l1", arch.feature_dim, arch.head_hidden, p)
            dense(f"{head}.l2", arch.head_hidden, width, p)
    return p


# -- forward / backward kernels ----------------------------------------------

def frames_to_rows(x: np.ndarray) -> np.ndarray:
    """(B, C, T, V[, M]) -> (B, T*M, C*V)."""
    if x.ndim == 4:
        x = x[..., None]
    B, C, T, V, M = x.shape
    return x.transpose(0, 2, 4, 1, 3).reshape(B, T * M, C * V)


def features_forward(p: Mapping[str, np.ndarray], x: np.ndarray, activation: str = "relu"):
    act, _ = _act(activation)
    rows = frames_to_rows(x)
    h = act(rows @ p["enc.l1.w"] + p["enc.l1.b"])
    pooled = h.mean(axis=1)
    f = pooled @ p["enc.l2.w"] + p["enc.l2.b"]
    return f, (rows, h, pooled)


def features_backward(p, cache, df: np.ndarray, activation: str = "relu") -> GradientSet:
    _, dact = _act(activation)
    rows, h, pooled = cache
    g = {
        "enc.l2.w": pooled.T @ df,
        "enc.l2.b": df.sum(axis=0),
    }
    dpooled = df @ p["enc.l2.w"].T
    dz = (dpooled[:, None, :] / h.shape[1]) * dact(h)
    g["enc.l1.w"] = np.einsum("brc,brh->ch", rows, dz)
    g["enc.l1.b"] = dz.sum(axis=(0, 1))
    return g


def normalize(y: np.ndarray) -> np.ndarray:
    return y / (np.linalg.norm(y, axis=-1, keepdims=True) + NORM_EPS)


def normalize_backward(y: np.ndarray, dz: np.ndarray) -> np.ndarray:
    """Gradient of ``y / (|y| + eps)`` along the last axis."""
    n = np.linalg.norm(y, axis=-1, keepdims=True)
    s = n + NORM_EPS
    safe_n = np.where(n > 0, n, 1.0)
    proj = np.sum(y * dz, axis=-1, keepdims=True)
    return dz / s - y * proj / (s * s * safe_n)


def head_forward(p, head: str, f: np.ndarray, activation: str = "relu"):
    act, _ = _act(activation)
    u = act(f @ p[f"{head}.l1.w"] + p[f"{head}.l1.b"])
    y = u @ p[f"{head}.l2.w"] + p[f"{head}.l2.b"]
    return normalize(y), (f, u, y)


def head_backward(p, head: str, cache, dz: np.ndarray, activation: str = "relu"):
    _, dact = _act(activation)
    f, u, y = cache
    dy = normalize_backward(y, dz)
    g = {f"{head}.l2.w": u.T @ dy, f"{head}.l2.b": dy.sum(axis=0)}
    du = (dy @ p[f"{head}.l2.w"].T) * dact(u)
    g[f"{head}.l1.w"] = f.T @ du
    g[f"{head}.l1.b"] = du.sum(axis=0)
    return g, du @ p[f"{head}.l1.w"].T


# -- the stack ----------------------------------------------------------------

@dataclass
class ForwardCache:
    feature_cache: tuple
    head_caches: dict[str, tuple]


class EncoderStack:
    """Query encoder, its heads, and the momentum key copy of ``enc``/``g``."""

    def __init__(self, arch: EncoderArch, seed: int | None = 0, params=None, key=None):
        self.arch = arch
        self.seed = seed
        if params is None:
            params = init_params(arch, np.random.default_rng(seed))
        self.params: dict[str, np.ndarray] = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        if key is None:
            key = {k: v.copy() for k, v in self.params.items() if k.startswith(KEY_PREFIXES)}
        self.key: dict[str, np.ndarray] = {k: np.asarray(v, dtype=np.float64) for k, v in key.items()}
        self._check_shapes()

    def _check_shapes(self) -> None:
        for name, arr in self.key.items():
            if name not in self.params or self.params[name].shape != arr.shape:
                raise ValueError(f"key block {name} does not match the query parameters")

    def _check_input(self, xb: np.ndarray) -> np.ndarray:
        xb = np.asarray(xb, dtype=np.float64)
        if xb.ndim not in (4, 5) or xb.shape[1] != self.arch.channels or xb.shape[3] != self.arch.joints:
            raise ValueError(
                f"input batch shape {xb.shape} does not match encoder "
                f"(B, C={self.arch.channels}, T, V={self.arch.joints}[, M])"
            )
        return xb

    def encode_batch(self, xb: np.ndarray, use_key: bool = False) -> np.ndarray:
        p = self.key if use_key else self.params
        f, _ = features_forward(p, self._check_input(xb), self.arch.activation)
        return f

    def encode(self, x: np.ndarray, use_key: bool = False) -> np.ndarray:
        """Feature vector for one sample shaped ``(C, T, V[, M])``."""
        return self.encode_batch(np.asarray(x)[None], use_key)[0]

    def project(self, feature: np.ndarray, head: str = "g", use_key: bool = False) -> np.ndarray:
        """Normalized head output for one feature ``(d_f,)`` or a batch ``(B, d_f)``."""
        if head not in HEADS or self.arch.head_width(head) == 0:
            raise ValueError(f"encoder has no head {head!r}")
        if use_key and head != "g":
            raise ValueError("only the g head has a key copy")
        f = np.asarray(feature, dtype=np.float64)
        single = f.ndim == 1
        fb = f[None] if single else f
        if fb.shape[-1] != self.arch.feature_dim:
            raise ValueError(f"feature width {fb.shape[-1]} != {self.arch.feature_dim}")
        p = self.key if use_key else self.params
        z, _ = head_forward(p, head, fb, self.arch.head_activation)
        return z[0] if single else z

    def embed_batch(self, xb: np.ndarray, head: str = "g", use_key: bool = False) -> np.ndarray:
        return self.project(self.encode_batch(xb, use_key), head, use_key)

    def forward(self, x: np.ndarray, heads=("g",)):
        """Batched training forward on the query path.

        Returns ``(features, {head: embeddings}, cache)``; pass the cache and
        upstream embedding gradients to :meth:`backward`.
        """
        f, fcache = features_forward(self.params, self._check_input(x), self.arch.activation)
        out, hcaches = {}, {}
        for head in heads:
            out[head], hcaches[head] = head_forward(self.params, head, f, self.arch.head_activation)
        return f, out, ForwardCache(fcache, hcaches)

    def backward(self, cache: ForwardCache, d_heads: Mapping[str, np.ndarray], d_feature=None) -> GradientSet:
        grads: GradientSet = {k: np.zeros_like(v) for k, v in self.params.items()}
        df = None if d_feature is None else np.array(d_feature, dtype=np.float64)
        for head, dz in d_heads.items():
            g, dfh = head_backward(self.params, head, cache.head_caches[head], dz, self.arch.head_activation)
            for k, v in g.items():
                grads[k] += v
            df = dfh if df is None else df + dfh
        if df is not None:
            for k, v in features_backward(self.params, cache.feature_cache, df, self.arch.activation).items():
                grads[k] += v
        return grads

    def momentum_update(self, m: float) -> None:
        if not 0.0 <= m <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {m}")
        for name, k in self.key.items():
            k *= m
            k += (1.0 - m) * self.params[name]

    def freeze(self) -> None:
        for arr in (*self.params.values(), *self.key.values()):
            arr.setflags(write=False)

    def copy(self) -> "EncoderStack":
        return EncoderStack(
            self.arch,
            self.seed,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.key.items()},
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        for group in (self.params, self.key):
            for name in sorted(group):
                h.update(name.encode())
                h.update(np.ascontiguousarray(group[name]).tobytes())
        return h.hexdigest()


def encode(stack: EncoderStack, modality, use_key: bool = False) -> np.ndarray:
    data = getattr(modality, "data", modality)
    return stack.encode(data, use_key)


def project(stack: EncoderStack, feature: np.ndarray, head: str = "g") -> np.ndarray:
    return stack.project(feature, head)


def momentum_update(stack: EncoderStack, m: float) -> None:
    stack.momentum_update(m)


# -- finite-difference gradient check -------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    worst: tuple[str, tuple[int, ...]] | None
    tolerance: float
    errors: list[float] = field(default_factory=list, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(
    params: Mapping[str, np.ndarray] | EncoderStack,
    loss_fn: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
    tolerance: float = 1e-4,
    n_coords: int = 200,
    step: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn()`` evaluates at the *current* contents of ``params`` and returns
    ``(loss, grads)``; coordinates are perturbed in place and restored.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if isinstance(params, EncoderStack):
        params = params.params
    loss0, grads = loss_fn()
    if not np.isfinite(loss0):
        raise FloatingPointError(f"loss is not finite at the check point: {loss0}")
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    errors, worst, worst_err = [], None, -1.0
    for k in np.sort(flat):
        bi = int(np.searchsorted(offsets, k, side="right") - 1)
        name = names[bi]
        arr = params[name]
        idx = np.unravel_index(int(k - offsets[bi]), arr.shape)
        orig = arr[idx]
        arr[idx] = orig + step
        lp, _ = loss_fn()
        arr[idx] = orig - step
        lm, _ = loss_fn()
        arr[idx] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise FloatingPointError(f"loss became non-finite perturbing {name}{idx}")
        num = (lp - lm) / (2.0 * step)
        ana = float(grads[name][idx]) if name in grads else 0.0
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        errors.append(err)
        if err > worst_err:
            worst_err, worst = err, (name, tuple(int(i) for i in idx))
    return GradCheckReport(max(errors) if errors else 0.0, len(errors), worst, tolerance, errors)


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path: str | Path, stacks: Mapping[str, EncoderStack], meta: Mapping | None = None) -> None:
    """Text header describing every block, then raw little-endian float64 data."""
    header = [f"{CKPT_MAGIC} {CKPT_VERSION}", "meta " + json.dumps(dict(meta or {}), sort_keys=True)]
    blobs = []
    for sname, stack in stacks.items():
        header.append(f"stack {sname} {stack.seed if stack.seed is not None else -1} {stack.arch.to_json()}")
        for group, arrays in (("query", stack.params), ("key", stack.key)):
            for bname in sorted(arrays):
                arr = arrays[bname]
                shape = ",".join(str(s) for s in arr.shape)
                header.append(f"block {sname}/{group}/{bname} {shape}")
                blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        for b in blobs:
            fh.write(b)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path) -> tuple[dict[str, EncoderStack], dict]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nend\n")
    if end < 0:
        raise CheckpointError(f"{path}: no header terminator")
    lines = raw[:end].decode().split("\n")
    body = memoryview(raw)[end + len(b"\nend\n"):]
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != CKPT_MAGIC or int(magic[1]) != CKPT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
    meta = json.loads(lines[1].split(" ", 1)[1])
    archs, seeds, blocks = {}, {}, []
    for line in lines[2:]:
        kind, rest = line.split(" ", 1)
        if kind == "stack":
            sname, seed, arch = rest.split(" ", 2)
            archs[sname] = EncoderArch.from_json(arch)
            seeds[sname] = None if int(seed) < 0 else int(seed)
        elif kind == "block":
            bname, shape = rest.rsplit(" ", 1)
            dims = tuple(int(s) for s in shape.split(",") if s)
            blocks.append((bname, dims))
        else:
            raise CheckpointError(f"{path}: unexpected header line {line!r}")
    pos = 0
    groups: dict[str, dict[str, dict[str, np.ndarray]]] = {s: {"query": {}, "key": {}} for s in archs}
    for bname, dims in blocks:
        n = int(np.prod(dims)) if dims else 1
        chunk = body[pos: pos + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: truncated data for block {bname}")
        sname, group, pname = bname.split("/", 2)
        groups[sname][group][pname] = np.frombuffer(chunk, dtype="<f8").reshape(dims).astype(np.float64)
        pos += 8 * n
    if pos != len(body):
        raise CheckpointError(f"{path}: {len(body) - pos} trailing bytes")
    stacks = {
        s: EncoderStack(archs[s], seeds[s], groups[s]["query"], groups[s]["key"]) for s in archs
    }
    return stacks, meta
