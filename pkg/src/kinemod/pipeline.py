"""Dataset construction, splitting and evaluation glue shared by the CLI and tests."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DataSection, RunConfig
from .dataio import (
    DatasetManifest,
    SkeletonDataset,
    SyntheticSpec,
    generate_synthetic,
    split_dataset,
)
from .distill import DistillResult, distill_train
from .engine import MultiModalModel, PretrainResult, clean_arrays, pretrain
from .evaluation import EvalReport, linear_eval
from .skeleton import SkeletonTopology, default_topology, load_topology


def synthetic_spec(data: DataSection) -> SyntheticSpec:
    return SyntheticSpec(
        class_count=data.class_count, samples_per_class=data.samples_per_class,
        frame_choices=data.frame_choices, noise=data.noise, fps=data.fps, subjects=data.subjects,
        cameras=data.cameras, amplitude_jitter=data.amplitude_jitter, seed=data.seed,
    )


def topology(data: DataSection) -> SkeletonTopology:
    return load_topology(data.topology) if data.topology else default_topology()


def load_dataset(data: DataSection, workers: int = 1) -> SkeletonDataset:
    """The full labelled dataset: generated in memory or read through a manifest."""
    if data.source == "synthetic":
        return SkeletonDataset.from_synthetic(generate_synthetic(synthetic_spec(data)))
    if data.source == "manifest":
        manifest = DatasetManifest.read(data.manifest)
        return SkeletonDataset.from_manifest(manifest, topology(data).joint_count, workers=workers)
    raise ValueError(f"unknown data source {data.source!r}; expected 'synthetic' or 'manifest'")


def split(dataset: SkeletonDataset, data: DataSection, seed: int = 0) -> tuple[SkeletonDataset, SkeletonDataset]:
    keys = data.train_keys or None
    train, held = split_dataset(dataset.manifest(), data.split, seed, keys, data.fraction)
    if not train or not held:
        raise ValueError(f"{data.split} split leaves an empty side ({len(train)} train / {len(held)} eval)")
    return dataset.subset(train), dataset.subset(held)


@dataclass
class Prepared:
    topo: SkeletonTopology
    train: SkeletonDataset
    held: SkeletonDataset


def prepare(config: RunConfig, workers: int = 1) -> Prepared:
    topo = topology(config.data)
    train, held = split(load_dataset(config.data, workers), config.data, config.data.seed)
    return Prepared(topo, train, held)


def run_pretrain(config: RunConfig, data: Prepared, out_dir: str | Path | None = None) -> PretrainResult:
    return pretrain(data.train, data.topo, config.pretrain, out_dir)


def run_distill(config: RunConfig, teacher: MultiModalModel, data: Prepared,
                out_dir: str | Path | None = None) -> DistillResult:
    return distill_train(teacher, data.train, data.topo, config.distill, out_dir)


def run_eval(config: RunConfig, model: MultiModalModel, data: Prepared) -> EvalReport:
    """Linear probes on frozen query-encoder features: fit on train, score on eval."""
    mods = model.modalities
    f_tr = model.features(clean_arrays(data.train, data.topo, mods))
    f_ev = model.features(clean_arrays(data.held, data.topo, mods))
    streams = [s for s in config.eval.streams] or mods
    missing = [s for s in streams if s not in mods]
    if missing:
        raise ValueError(f"checkpoint has no stream(s) {missing}; it covers {mods}")
    knn_k = config.eval.knn_k or None
    _, report = linear_eval(f_tr, data.train.labels, f_ev, data.held.labels, config.probe,
                            config.eval.fusion, knn_k, streams)
    return report


def fused_or_mean(report: EvalReport) -> float:
    return report.fused_top1 if report.fused_top1 is not None else float(np.mean(list(report.top1.values())))
