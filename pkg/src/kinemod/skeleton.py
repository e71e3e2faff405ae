"""Skeleton sequences, joint topology and temporal resampling.

Sequences are stored channel-first as ``(C, T, V)`` with an optional trailing
body axis ``(C, T, V, M)`` when a second actor is present. Every array-level
routine in the package indexes only the first three axes, so the body axis
rides along untouched.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

RESAMPLED_FRAMES = 50
TOPOLOGY_MAGIC = "KINEMOD-TOPOLOGY"
TOPOLOGY_VERSION = 1


class TopologyError(ValueError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SkeletonSequence:
    """3-D joint positions over time.

    ``original_frames`` is the frame count before any resampling; it travels
    with the sequence so the time scale can be recovered after resizing.
    """

    data: np.ndarray
    original_frames: int | None = None
    label: int | None = None

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim not in (3, 4) or data.shape[0] != 3:
            raise ValueError(f"expected (3, T, V[, M]) coordinates, got shape {data.shape}")
        if data.shape[1] < 1 or data.shape[2] < 1:
            raise ValueError(f"T and V must be positive, got shape {data.shape}")
        if data.ndim == 4 and not 1 <= data.shape[3] <= 2:
            raise ValueError(f"at most 2 bodies supported, got {data.shape[3]}")
        if not np.all(np.isfinite(data)):
            bad = np.argwhere(~np.isfinite(data))[0]
            raise ValueError(f"non-finite coordinate at index {tuple(int(i) for i in bad)}")
        if self.original_frames is not None and int(self.original_frames) < 2:
            raise ValueError(f"original_frames must be >= 2, got {self.original_frames}")
        object.__setattr__(self, "data", data)

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def joints(self) -> int:
        return self.data.shape[2]

    @property
    def bodies(self) -> int:
        return 1 if self.data.ndim == 3 else self.data.shape[3]

    def replace(self, **changes) -> "SkeletonSequence":
        kwargs = {"data": self.data, "original_frames": self.original_frames, "label": self.label}
        kwargs.update(changes)
        return SkeletonSequence(**kwargs)


@dataclass(frozen=True)
class TimeScale:
    gamma: float

    def __post_init__(self):
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"time scale must be positive and finite, got {self.gamma}")


def time_scale(seq: SkeletonSequence) -> TimeScale:
    """Ratio of the pre-resampling frame count to the 50-frame working length.

    Short clips give gamma < 1; the value is passed through unclamped.
    """
    if seq.original_frames is None:
        raise ValueError("sequence has no original_frames recorded; cannot compute time scale")
    return TimeScale(seq.original_frames / RESAMPLED_FRAMES)


def resize_array(x: np.ndarray, target_frames: int) -> np.ndarray:
    """Endpoint-anchored piecewise-linear resampling along axis 1.

    Output frame ``t`` samples the input at ``t * (T_in - 1) / (T_out - 1)``.
    The bracket index and fraction are computed in integer arithmetic so
    both endpoints and the identity resize are reproduced exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    t_in = x.shape[1]
    if t_in < 2:
        raise ValueError(f"need at least 2 input frames to interpolate, got {t_in}")
    if target_frames < 2:
        raise ValueError(f"target_frames must be >= 2, got {target_frames}")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot resample non-finite coordinates")
    num = np.arange(target_frames, dtype=np.int64) * (t_in - 1)
    den = target_frames - 1
    lo = num // den
    rem = num % den
    # the last sample sits exactly on the final input frame with rem == 0
    lo = np.minimum(lo, t_in - 2)
    rem = np.where(num // den > t_in - 2, den, rem)
    frac = (rem / den).reshape((1, -1) + (1,) * (x.ndim - 2))
    x0 = x[:, lo]
    # x0 + f*(x1 - x0) is exact wherever the track is locally constant
    out = x0 + frac * (x[:, lo + 1] - x0)
    out[:, -1] = x[:, -1]
    return out


def resize_sequence(seq: SkeletonSequence, target_frames: int = RESAMPLED_FRAMES) -> SkeletonSequence:
    if seq.frames < 2:
        raise ValueError(f"sequence has {seq.frames} frame(s); at least 2 are required")
    original = seq.original_frames if seq.original_frames is not None else seq.frames
    return seq.replace(data=resize_array(seq.data, target_frames), original_frames=original)


def center_on_joint(seq: SkeletonSequence, joint: int = 1) -> SkeletonSequence:
    """Translate every body so that ``joint`` of the first body sits at the origin in frame 0.

    Bodies that are all zeros (padding) are left untouched.
    """
    if not 0 <= joint < seq.joints:
        raise ValueError(f"centre joint {joint} outside 0..{seq.joints - 1}")
    x = np.array(seq.data)
    origin = x[:, 0, joint] if x.ndim == 3 else x[:, 0, joint, 0]
    if x.ndim == 3:
        x = x - origin[:, None, None]
    else:
        present = np.any(x != 0, axis=(0, 1, 2))
        x[..., present] -= origin[:, None, None, None]
    return seq.replace(data=x)


@dataclass(frozen=True)
class SkeletonTopology:
    """Joint tree plus one hinge definition per joint.

    ``bone_pairs`` holds ``(child, parent)`` joint indices. A bone is addressed
    by its child joint, which is also the channel it occupies in the bone
    tensor; ``hinge_defs[v]`` names the two bones meeting at joint ``v``.
    """

    joint_count: int
    bone_pairs: tuple[tuple[int, int], ...]
    hinge_defs: tuple[tuple[int, int], ...] = field(default=())
    name: str = ""

    def __post_init__(self):
        pairs = tuple((int(c), int(p)) for c, p in self.bone_pairs)
        object.__setattr__(self, "bone_pairs", pairs)
        if not self.hinge_defs:
            object.__setattr__(self, "hinge_defs", build_hinges(self.joint_count, pairs))
        else:
            object.__setattr__(
                self, "hinge_defs", tuple((int(i), int(j)) for i, j in self.hinge_defs)
            )
        self.validate()

    @property
    def root(self) -> int:
        children = {c for c, _ in self.bone_pairs}
        return next(v for v in range(self.joint_count) if v not in children)

    @property
    def parents(self) -> np.ndarray:
        par = np.full(self.joint_count, -1, dtype=np.int64)
        for c, p in self.bone_pairs:
            par[c] = p
        return par

    def validate(self) -> None:
        V = self.joint_count
        if V < 1:
            raise TopologyError("joint_count must be positive")
        if len(self.bone_pairs) != V - 1:
            raise TopologyError(f"a {V}-joint tree needs {V - 1} bones, got {len(self.bone_pairs)}")
        seen = set()
        for c, p in self.bone_pairs:
            if not (0 <= c < V and 0 <= p < V):
                raise TopologyError(f"bone ({c}, {p}) references a joint outside 0..{V - 1}")
            if c == p:
                raise TopologyError(f"bone ({c}, {p}) is a self-loop")
            if c in seen:
                raise TopologyError(f"joint {c} has more than one parent")
            seen.add(c)
        roots = [v for v in range(V) if v not in seen]
        if len(roots) != 1:
            raise TopologyError(f"expected exactly one root joint, found {roots}")
        par = self.parents
        for v in range(V):
            hops, u = 0, v
            while par[u] >= 0:
                u = par[u]
                hops += 1
                if hops > V:
                    raise TopologyError(f"cycle through joint {v}")
        if len(self.hinge_defs) != V:
            raise TopologyError(f"need one hinge per joint ({V}), got {len(self.hinge_defs)}")
        root = roots[0]
        for v, (i, j) in enumerate(self.hinge_defs):
            if i == j:
                raise TopologyError(f"hinge of joint {v} uses bone {i} twice")
            for b in (i, j):
                if not 0 <= b < V or b == root:
                    raise TopologyError(f"hinge of joint {v} references invalid bone {b}")


def build_hinges(joint_count: int, bone_pairs) -> tuple[tuple[int, int], ...]:
    """Deterministic hinge assignment, one per joint.

    * inner joint: (bone into v, bone from v to its first child)
    * leaf: (bone into the parent, bone into v); when the parent is the root,
      the root's first other child bone stands in for the missing grandparent
    * root: its first two child bones
    """
    children: dict[int, list[int]] = {v: [] for v in range(joint_count)}
    parent = {}
    for c, p in bone_pairs:
        if not (0 <= c < joint_count and 0 <= p < joint_count):
            raise TopologyError(f"bone ({c}, {p}) references a joint outside 0..{joint_count - 1}")
        children[p].append(c)
        parent[c] = p
    hinges = []
    for v in range(joint_count):
        if v not in parent:
            if len(children[v]) < 2:
                raise TopologyError(f"root joint {v} needs two child bones to define its hinge")
            hinges.append((children[v][0], children[v][1]))
        elif children[v]:
            hinges.append((v, children[v][0]))
        else:
            p = parent[v]
            if p in parent:
                hinges.append((p, v))
            else:
                others = [c for c in children[p] if c != v]
                if not others:
                    raise TopologyError(f"leaf joint {v} has no neighbouring bone for a hinge")
                hinges.append((others[0], v))
    return tuple(hinges)


def parse_topology(text: str, name: str = "") -> SkeletonTopology:
    joint_count = None
    bones: list[tuple[int, int]] = []
    hinges: dict[int, tuple[int, int]] = {}
    section = None
    saw_magic = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        try:
            if fields[0] == TOPOLOGY_MAGIC:
                if int(fields[1]) != TOPOLOGY_VERSION:
                    raise TopologyError(f"line {lineno}: unsupported topology version {fields[1]}")
                saw_magic = True
            elif fields[0] == "JOINTS":
                joint_count = int(fields[1])
            elif fields[0] in ("BONES", "HINGES"):
                section = fields[0]
            elif section == "BONES":
                c, p = (int(f) for f in fields)
                bones.append((c, p))
            elif section == "HINGES":
                v, i, j = (int(f) for f in fields)
                hinges[v] = (i, j)
            else:
                raise TopologyError(f"line {lineno}: unexpected record {raw.strip()!r}")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, TopologyError):
                raise
            raise TopologyError(f"line {lineno}: malformed record {raw.strip()!r}") from exc
    if not saw_magic:
        raise TopologyError(f"missing '{TOPOLOGY_MAGIC} {TOPOLOGY_VERSION}' header")
    if joint_count is None:
        joint_count = len(bones) + 1
    hinge_defs = ()
    if hinges:
        if sorted(hinges) != list(range(joint_count)):
            raise TopologyError("HINGES section must list every joint exactly once")
        hinge_defs = tuple(hinges[v] for v in range(joint_count))
    return SkeletonTopology(joint_count, tuple(bones), hinge_defs, name=name)


def format_topology(topo: SkeletonTopology) -> str:
    lines = [
        f"{TOPOLOGY_MAGIC} {TOPOLOGY_VERSION}",
        f"JOINTS {topo.joint_count}",
        "BONES  # child parent",
    ]
    lines += [f"{c} {p}" for c, p in topo.bone_pairs]
    lines.append("HINGES  # joint boneI boneJ")
    lines += [f"{v} {i} {j}" for v, (i, j) in enumerate(topo.hinge_defs)]
    return "\n".join(lines) + "\n"


def load_topology(path: str | Path) -> SkeletonTopology:
    path = Path(path)
    return parse_topology(path.read_text(), name=path.stem)


def default_topology() -> SkeletonTopology:
    """25-joint NTU RGB+D skeleton (0-based), rooted at the spine-shoulder joint."""
    text = resources.files("kinemod.data").joinpath("ntu25.topology").read_text()
    return parse_topology(text, name="ntu25")


def toy_topology() -> SkeletonTopology:
    """Five joints: root 0 with two 2-bone chains 0-1-2 and 0-3-4."""
    return SkeletonTopology(5, ((1, 0), (2, 1), (3, 0), (4, 3)), name="toy5")
