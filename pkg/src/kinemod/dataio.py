"""Skeleton file ingestion, synthetic action generation, manifests and splits."""
from __future__ import annotations

import csv
import io
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .modality import ALL_MODALITIES, ModalityKind, ModalityTensor
from .skeleton import SkeletonSequence, center_on_joint, resize_sequence

MAX_BODIES = 2
MANIFEST_MAGIC = "# kinemod-manifest 1"
MANIFEST_FIELDS = ("id", "path", "label", "subject", "camera")
BLOB_MAGIC = b"KMOD"
BLOB_VERSION = 1
_BLOB_HEADER = struct.Struct("<4s6H")

# NTU train subjects / cameras for the standard cross-subject / cross-view protocols
NTU_TRAIN_SUBJECTS = (1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38)
NTU_TRAIN_CAMERAS = (2, 3)
# sequences are translated so this joint (spine middle) starts at the origin
CENTER_JOINT = 1


class SkeletonParseError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        self.path, self.lineno = str(path), lineno
        super().__init__(f"{path}:{lineno}: {message}")


class DatasetLoadError(ValueError):
    """One or more files of a dataset failed to load; ``errors`` lists each one."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__(f"{len(self.errors)} file(s) failed to load:\n" + "\n".join(self.errors))


# -- NTU skeleton text format ---------------------------------------------------

def _parse_lines(lines: Sequence[str], path, joint_count: int) -> SkeletonSequence:
    pos = 0

    def take() -> tuple[int, str]:
        nonlocal pos
        if pos >= len(lines):
            raise SkeletonParseError(path, pos + 1, "unexpected end of file")
        pos += 1
        return pos, lines[pos - 1]

    def take_int(what: str) -> int:
        lineno, line = take()
        try:
            value = int(line.strip())
        except ValueError:
            raise SkeletonParseError(path, lineno, f"expected {what}, got {line.strip()!r}") from None
        if value < 0:
            raise SkeletonParseError(path, lineno, f"negative {what}")
        return value

    n_frames = take_int("frame count")
    if n_frames < 2:
        raise SkeletonParseError(path, 1, f"sequence has {n_frames} frame(s); at least 2 are required")
    data = np.zeros((3, n_frames, joint_count, MAX_BODIES))
    max_bodies = 0
    for t in range(n_frames):
        n_bodies = take_int("body count")
        max_bodies = max(max_bodies, min(n_bodies, MAX_BODIES))
        for m in range(n_bodies):
            take()  # body metadata: id, clipped edges, hand states, lean, tracking
            lineno = pos + 1
            n_joints = take_int("joint count")
            if n_joints != joint_count:
                raise SkeletonParseError(
                    path, lineno, f"body has {n_joints} joints, topology expects {joint_count}"
                )
            for v in range(n_joints):
                lineno, line = take()
                fields = line.split()
                try:
                    xyz = [float(f) for f in fields[:3]]
                except ValueError:
                    raise SkeletonParseError(path, lineno, f"non-numeric joint field in {line.strip()!r}") from None
                if len(xyz) < 3:
                    raise SkeletonParseError(path, lineno, f"joint line needs x y z, got {line.strip()!r}")
                if not all(math.isfinite(c) for c in xyz):
                    raise SkeletonParseError(path, lineno, "non-finite joint coordinate")
                if m < MAX_BODIES:
                    data[:, t, v, m] = xyz
    if any(line.strip() for line in lines[pos:]):
        raise SkeletonParseError(path, pos + 1, "trailing data after the last frame")
    arr = data[..., 0] if max_bodies <= 1 else data
    return SkeletonSequence(arr, original_frames=n_frames)


def parse_skeleton_file(path: str | Path, joint_count: int = 25) -> SkeletonSequence:
    """Read an NTU RGB+D ``.skeleton`` text file.

    Only x y z of each joint are kept. At most two bodies are read in file
    order; a frame missing a body leaves zeros. The body axis is dropped when
    no frame has a second body.
    """
    text = Path(path).read_text()
    return _parse_lines(text.splitlines(), path, joint_count)


def parse_skeleton_text(text: str, joint_count: int = 25, name: str = "<string>") -> SkeletonSequence:
    return _parse_lines(text.splitlines(), name, joint_count)


def format_skeleton(seq: SkeletonSequence) -> str:
    data = seq.data if seq.data.ndim == 4 else seq.data[..., None]
    out = io.StringIO()
    out.write(f"{seq.frames}\n")
    for t in range(seq.frames):
        present = [m for m in range(data.shape[3]) if m == 0 or np.any(data[:, t, :, m])]
        out.write(f"{len(present)}\n")
        for m in present:
            out.write(f"{m} 0 0 0 0 0 0 0 0 2\n{seq.joints}\n")
            for v in range(seq.joints):
                x, y, z = (repr(float(c)) for c in data[:, t, v, m])
                out.write(f"{x} {y} {z} 0 0 0 0 0 0 0 0 2\n")
    return out.getvalue()


def write_skeleton_file(path: str | Path, seq: SkeletonSequence) -> None:
    Path(path).write_text(format_skeleton(seq))


# -- modality export ---------------------------------------------------------------

def modality_blob(modalities: dict[ModalityKind, ModalityTensor | np.ndarray]) -> bytes:
    """16-byte header (magic, version, count, C, T, V, M) then float32 LE blocks."""
    arrays = []
    for kind in ALL_MODALITIES:
        if kind in modalities:
            arr = getattr(modalities[kind], "data", modalities[kind])
            arrays.append(np.asarray(arr))
    if len(arrays) != len(ALL_MODALITIES):
        raise ValueError("blob export needs all six modalities")
    shape = arrays[0].shape
    C, T, V = shape[:3]
    M = shape[3] if len(shape) == 4 else 1
    head = _BLOB_HEADER.pack(BLOB_MAGIC, BLOB_VERSION, len(arrays), C, T, V, M)
    return head + b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)


def read_modality_blob(raw: bytes) -> dict[ModalityKind, np.ndarray]:
    if len(raw) < _BLOB_HEADER.size:
        raise ValueError("modality blob shorter than its header")
    magic, version, count, C, T, V, M = _BLOB_HEADER.unpack_from(raw)
    if magic != BLOB_MAGIC or version != BLOB_VERSION:
        raise ValueError(f"not a version-{BLOB_VERSION} modality blob")
    shape = (C, T, V) if M == 1 else (C, T, V, M)
    n = C * T * V * M
    expected = _BLOB_HEADER.size + 4 * n * count
    if len(raw) != expected:
        raise ValueError(f"modality blob has {len(raw)} bytes, expected {expected}")
    out = {}
    for i, kind in enumerate(ALL_MODALITIES[:count]):
        start = _BLOB_HEADER.size + 4 * n * i
        out[kind] = np.frombuffer(raw, dtype="<f4", count=n, offset=start).reshape(shape).copy()
    return out


def modality_csv(modalities: dict[ModalityKind, ModalityTensor | np.ndarray]) -> str:
    """Debug dump: one row per (t, v[, body]) with x/y/z columns for every modality."""
    arrays = {k: np.asarray(getattr(modalities[k], "data", modalities[k])) for k in ALL_MODALITIES}
    first = arrays[ALL_MODALITIES[0]]
    bodies = first.shape[3] if first.ndim == 4 else 1
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["t", "v", "body"] + [f"{k.value}_{c}" for k in ALL_MODALITIES for c in "xyz"])
    for t in range(first.shape[1]):
        for v in range(first.shape[2]):
            for m in range(bodies):
                row = [t, v, m]
                for k in ALL_MODALITIES:
                    a = arrays[k]
                    vals = a[:, t, v, m] if a.ndim == 4 else a[:, t, v]
                    row += [repr(float(c)) for c in vals]
                w.writerow(row)
    return out.getvalue()


# -- manifests and splits -----------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    id: str
    path: str
    label: int
    subject: int
    camera: int


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate sample ids in manifest: {dupes[:5]}")

    def resolve(self, record: SampleRecord) -> Path:
        return self.root / record.path

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(MANIFEST_MAGIC + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_FIELDS)
            for r in self.records:
                w.writerow([r.id, r.path, r.label, r.subject, r.camera])

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        with open(path, newline="") as fh:
            first = fh.readline().rstrip("\r\n")
            if first != MANIFEST_MAGIC:
                raise ValueError(f"{path}: missing manifest header {MANIFEST_MAGIC!r}")
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
                raise ValueError(f"{path}: manifest columns must be {','.join(MANIFEST_FIELDS)}")
            records = []
            for lineno, row in enumerate(reader, start=3):
                try:
                    records.append(
                        SampleRecord(row["id"], row["path"], int(row["label"]),
                                     int(row["subject"] or -1), int(row["camera"] or -1))
                    )
                except (TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad manifest row ({exc})") from None
        return cls(records, path.parent)


SPLIT_RULES = ("cross-subject", "cross-view", "random-fraction")


def split_dataset(
    manifest: DatasetManifest,
    rule: str,
    seed: int = 0,
    train_keys: Iterable[int] | None = None,
    fraction: float = 0.8,
) -> tuple[list[str], list[str]]:
    """Partition sample ids into (train, eval), each in manifest order.

    Cross-subject/cross-view split on subject/camera ids; ``train_keys``
    defaults to the NTU training subjects/cameras that occur in the data.
    """
    recs = manifest.records
    if rule == "random-fraction":
        if not 0.0 < fraction < 1.0:
            raise ValueError(f"fraction must be in (0, 1), got {fraction}")
        perm = np.random.default_rng(seed).permutation(len(recs))
        chosen = set(perm[: int(round(fraction * len(recs)))].tolist())
        train = [r.id for i, r in enumerate(recs) if i in chosen]
        return train, [r.id for i, r in enumerate(recs) if i not in chosen]
    if rule not in SPLIT_RULES:
        raise ValueError(f"unknown split rule {rule!r}; expected one of {SPLIT_RULES}")
    attr, defaults = ("subject", NTU_TRAIN_SUBJECTS) if rule == "cross-subject" else ("camera", NTU_TRAIN_CAMERAS)
    keys = [getattr(r, attr) for r in recs]
    if any(k < 0 for k in keys):
        missing = next(r.id for r in recs if getattr(r, attr) < 0)
        raise ValueError(f"{rule} split needs a {attr} id for every sample; {missing} has none")
    train_set = set(defaults) if train_keys is None else set(train_keys)
    train = [r.id for r in recs if getattr(r, attr) in train_set]
    return train, [r.id for r in recs if getattr(r, attr) not in train_set]


# -- synthetic actions --------------------------------------------------------------

# rest pose (metres, y up) in NTU joint order
_REST_POSE = np.array([
    [0.00, 1.00, 0.00], [0.00, 1.25, 0.00], [0.00, 1.55, 0.02], [0.00, 1.70, 0.03],
    [-0.18, 1.42, 0.00], [-0.21, 1.15, 0.02], [-0.22, 0.92, 0.05], [-0.22, 0.85, 0.06],
    [0.18, 1.42, 0.00], [0.21, 1.15, 0.02], [0.22, 0.92, 0.05], [0.22, 0.85, 0.06],
    [-0.10, 0.95, 0.00], [-0.11, 0.52, 0.03], [-0.11, 0.10, 0.00], [-0.11, 0.05, 0.10],
    [0.10, 0.95, 0.00], [0.11, 0.52, 0.03], [0.11, 0.10, 0.00], [0.11, 0.05, 0.10],
    [0.00, 1.45, 0.00], [-0.22, 0.78, 0.07], [-0.19, 0.85, 0.09], [0.22, 0.78, 0.07],
    [0.19, 0.85, 0.09],
])
_NTU_PARENTS = np.array([1, 20, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18, -1, 22, 7, 24, 11])
_AXES = {"x": (1.0, 0.0, 0.0), "y": (0.0, 1.0, 0.0), "z": (0.0, 0.0, 1.0)}


@dataclass(frozen=True)
class JointProgram:
    joint: int
    axis: str
    amplitude: float
    phase: float = 0.0


@dataclass(frozen=True)
class ClassProgram:
    """Sinusoidal joint rotations at ``frequency`` Hz plus a root drift (m/s)."""

    frequency: float
    joints: tuple[JointProgram, ...]
    drift: tuple[float, float, float] = (0.0, 0.0, 0.0)


def default_programs(class_count: int) -> tuple[ClassProgram, ...]:
    """Arm-wave family: class 1 repeats class 0 faster, class 2 swings on another axis."""
    base = [
        ClassProgram(0.5, (JointProgram(8, "z", 0.9), JointProgram(9, "z", 0.5, 0.6))),
        ClassProgram(1.0, (JointProgram(8, "z", 0.9), JointProgram(9, "z", 0.6, 0.6))),
        ClassProgram(0.5, (JointProgram(8, "x", 0.9), JointProgram(9, "x", 0.5, 0.6))),
        ClassProgram(0.75, (JointProgram(16, "x", 0.6), JointProgram(12, "x", 0.6, math.pi)),
                     drift=(0.0, 0.0, 0.4)),
        ClassProgram(0.5, (JointProgram(4, "z", -0.9), JointProgram(5, "z", -0.5, 0.6))),
        ClassProgram(0.4, (JointProgram(1, "x", 0.5), JointProgram(2, "x", 0.3, 0.3))),
    ]
    programs = []
    for c in range(class_count):
        p = base[c % len(base)]
        if c >= len(base):
            p = ClassProgram(p.frequency * (1 + 0.5 * (c // len(base))), p.joints, p.drift)
        programs.append(p)
    return tuple(programs)


@dataclass(frozen=True)
class SyntheticSpec:
    class_count: int = 3
    samples_per_class: int = 20
    frame_choices: tuple[int, ...] = (40, 50, 100)
    joints: int = 25
    noise: float = 0.01
    # the shortest clip (40 frames) then spans one full cycle of the slowest program
    fps: float = 20.0
    subjects: int = 6
    cameras: int = 3
    amplitude_jitter: float = 0.1
    seed: int = 7
    programs: tuple[ClassProgram, ...] | None = None

    def __post_init__(self):
        if self.joints != 25:
            raise ValueError("the synthetic generator models the 25-joint NTU skeleton only")
        if min(self.frame_choices) < 2:
            raise ValueError("frame_choices must all be >= 2")
        if self.programs is None:
            object.__setattr__(self, "programs", default_programs(self.class_count))
        if len(self.programs) != self.class_count:
            raise ValueError("one program per class required")
        if len(set(self.programs)) != len(self.programs):
            raise ValueError("class programs must be pairwise distinct")


@dataclass
class SyntheticSample:
    id: str
    sequence: SkeletonSequence
    label: int
    subject: int
    camera: int
    params: np.ndarray  # generative parameters, for oracle-feature checks


def _axis_rotation(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotation matrices, one per angle: (..., 3, 3)."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.stack([
        np.stack([c + x * x * C, x * y * C - z * s, x * z * C + y * s], -1),
        np.stack([y * x * C + z * s, c + y * y * C, y * z * C - x * s], -1),
        np.stack([z * x * C - y * s, z * y * C + x * s, c + z * z * C], -1),
    ], -2)


def _forward_kinematics(rest: np.ndarray, local: np.ndarray) -> np.ndarray:
    """Joint positions (T, V, 3) from per-joint local rotations (T, V, 3, 3)."""
    T, V = local.shape[:2]
    order = []
    seen = set()
    while len(order) < V:
        for v in range(V):
            p = _NTU_PARENTS[v]
            if v not in seen and (p < 0 or p in seen):
                order.append(v)
                seen.add(v)
    world = np.zeros((T, V, 3, 3))
    pos = np.zeros((T, V, 3))
    for v in order:
        p = _NTU_PARENTS[v]
        if p < 0:
            world[:, v] = local[:, v]
            pos[:, v] = rest[v]
        else:
            world[:, v] = world[:, p] @ local[:, v]
            pos[:, v] = pos[:, p] + np.einsum("tij,j->ti", world[:, p], rest[v] - rest[p])
    return pos


def _synth_one(spec: SyntheticSpec, program: ClassProgram, rng: np.random.Generator, camera: int, scale: float):
    T = int(rng.choice(spec.frame_choices))
    t_sec = np.arange(T) / spec.fps
    phase0 = rng.uniform(0, 2 * np.pi)
    amp_scale = 1.0 + rng.uniform(-spec.amplitude_jitter, spec.amplitude_jitter)
    local = np.broadcast_to(np.eye(3), (T, spec.joints, 3, 3)).copy()
    for jp in program.joints:
        angle = amp_scale * jp.amplitude * np.sin(2 * np.pi * program.frequency * t_sec + phase0 + jp.phase)
        local[:, jp.joint] = local[:, jp.joint] @ _axis_rotation(np.array(_AXES[jp.axis]), angle)
    pos = _forward_kinematics(_REST_POSE * scale, local)
    pos += np.asarray(program.drift)[None, None, :] * t_sec[:, None, None]
    # +-15 degrees: wider spreads make a z-axis swing under one camera mirror an x-axis swing under another
    yaw = (camera - (spec.cameras + 1) / 2) * (np.pi / 12)
    R = _axis_rotation(np.array(_AXES["y"]), np.array(yaw))
    pos = pos @ R.T
    pos += rng.normal(0.0, spec.noise, size=pos.shape)
    params = np.array([program.frequency, amp_scale, phase0, T / spec.fps])
    return pos.transpose(2, 0, 1), T, params


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> list[SyntheticSample]:
    """Deterministic labelled dataset; sample order interleaves classes.

    Subjects differ in body scale, cameras in viewing yaw. Sequences keep
    their native length (``frame_choices``) so the time scale varies.
    """
    rng = np.random.default_rng(spec.seed)
    scales = 1.0 + np.linspace(-0.08, 0.08, spec.subjects)
    samples = []
    for i in range(spec.samples_per_class):
        for c, program in enumerate(spec.programs):
            n = len(samples)
            # every subject and camera sees every class
            subject = i % spec.subjects + 1
            camera = (i // spec.subjects + c) % spec.cameras + 1
            data, T, params = _synth_one(spec, program, rng, camera, scales[subject - 1])
            axis_code = np.array([[_AXES[jp.axis] for jp in program.joints]]).reshape(-1)
            feature = np.concatenate([params, axis_code, [jp.joint for jp in program.joints]])
            seq = SkeletonSequence(data, original_frames=T, label=c)
            samples.append(SyntheticSample(f"S{n:04d}", seq, c, subject, camera, feature))
    return samples


# -- in-memory dataset ------------------------------------------------------------

@dataclass
class SkeletonDataset:
    """Resampled sequences with labels and split metadata, aligned by position."""

    sequences: list[SkeletonSequence]
    labels: np.ndarray
    ids: list[str]
    subjects: np.ndarray
    cameras: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        n = len(self.sequences)
        if not (len(self.labels) == len(self.ids) == len(self.subjects) == len(self.cameras) == n):
            raise ValueError("dataset columns have different lengths")
        bodies = max((s.bodies for s in self.sequences), default=1)
        if bodies > 1:
            self.sequences = [s if s.bodies == bodies else s.replace(data=_pad_bodies(s.data, bodies))
                              for s in self.sequences]

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, ids: Iterable[str]) -> "SkeletonDataset":
        pos = {sid: i for i, sid in enumerate(self.ids)}
        idx = [pos[i] for i in ids]
        return SkeletonDataset(
            [self.sequences[i] for i in idx], self.labels[idx], [self.ids[i] for i in idx],
            self.subjects[idx], self.cameras[idx],
        )

    def manifest(self, paths: Sequence[str] | None = None) -> DatasetManifest:
        paths = paths or [""] * len(self)
        return DatasetManifest([
            SampleRecord(sid, p, int(lab), int(sub), int(cam))
            for sid, p, lab, sub, cam in zip(self.ids, paths, self.labels, self.subjects, self.cameras)
        ])

    @classmethod
    def from_synthetic(cls, samples: Sequence[SyntheticSample], frames: int = 50,
                       center_joint: int | None = CENTER_JOINT) -> "SkeletonDataset":
        return cls(
            [_prepare(s.sequence, frames, center_joint) for s in samples],
            [s.label for s in samples], [s.id for s in samples],
            [s.subject for s in samples], [s.camera for s in samples],
        )

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, joint_count: int = 25, frames: int = 50,
                      center_joint: int | None = CENTER_JOINT, workers: int = 1) -> "SkeletonDataset":
        raw = load_sequences(manifest, joint_count, workers)
        seqs = [_prepare(s, frames, center_joint) for s in raw]
        recs = manifest.records
        return cls(seqs, [r.label for r in recs], [r.id for r in recs],
                   [r.subject for r in recs], [r.camera for r in recs])


def _load_one(path: Path, joint_count: int):
    try:
        return parse_skeleton_file(path, joint_count), None
    except (OSError, UnicodeDecodeError) as exc:
        return None, f"{path}: {exc.strerror if isinstance(exc, OSError) and exc.strerror else exc}"
    except ValueError as exc:
        return None, str(exc)


def load_sequences(manifest: DatasetManifest, joint_count: int = 25, workers: int = 1) -> list[SkeletonSequence]:
    """Parse every file of a manifest, in manifest order.

    Files are independent, so ``workers > 1`` parses them concurrently. All
    failures are collected and raised together as one ``DatasetLoadError``.
    """
    paths = [manifest.resolve(r) for r in manifest.records]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda p: _load_one(p, joint_count), paths))
    else:
        results = [_load_one(p, joint_count) for p in paths]
    errors = [err for _, err in results if err is not None]
    if errors:
        raise DatasetLoadError(errors)
    return [seq for seq, _ in results]


def _prepare(seq: SkeletonSequence, frames: int, center_joint: int | None) -> SkeletonSequence:
    if center_joint is not None:
        seq = center_on_joint(seq, center_joint)
    return resize_sequence(seq, frames)


def _pad_bodies(x: np.ndarray, bodies: int) -> np.ndarray:
    if x.ndim == 3:
        x = x[..., None]
    pad = np.zeros(x.shape[:3] + (bodies - x.shape[3],))
    return np.concatenate([x, pad], axis=3)
