"""``kinemod`` command-line entry point.

Subcommands: generate, derive, pretrain, distill, eval, gradcheck. Every
command takes ``--config PATH``, ``--seed N``, ``--workers N``, ``--out DIR``
and repeatable ``--set section.key=value`` overrides. Exit codes: 0 success,
1 data error, 2 usage or configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import pipeline
from .config import ConfigError, RunConfig, load_config
from .dataio import (
    DatasetLoadError,
    DatasetManifest,
    SampleRecord,
    generate_synthetic,
    modality_blob,
    write_skeleton_file,
)
from .distill import DISTILL_FIELDS
from .encoder import CheckpointError
from .engine import MultiModalModel, TrainingDiverged, metrics_csv
from .gradcheck import LOSSES, SuiteSpec, run_suite
from .modality import derive_all

log = logging.getLogger("kinemod")

EXIT_OK, EXIT_DATA, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    """Missing prerequisite or inconsistent arguments (exit code 2)."""


class DataError(Exception):
    """Unreadable or malformed input data (exit code 1)."""


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _resolve_config(args) -> RunConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides += [f"{s}.seed={args.seed}" for s in ("pretrain", "distill", "probe")]
    if getattr(args, "data", None):
        overrides += ["data.source=manifest", f"data.manifest={args.data}"]
    config = load_config(args.config, overrides)
    if config.data.source == "manifest":
        _require(config.data.manifest, "dataset manifest")
    if config.data.topology:
        _require(config.data.topology, "topology file")
    return config


def _write_config(out: Path, config: RunConfig) -> None:
    _write(out / "config.ini", f"# config-hash {config.digest()}\n" + config.to_ini())


def _prepare(config: RunConfig, workers: int) -> pipeline.Prepared:
    try:
        return pipeline.prepare(config, workers)
    except DatasetLoadError:
        raise
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None


# -- commands ---------------------------------------------------------------------

def cmd_generate(args, config: RunConfig) -> int:
    out = Path(args.out)
    samples = generate_synthetic(pipeline.synthetic_spec(config.data))
    (out / "skeletons").mkdir(parents=True, exist_ok=True)
    paths = [f"skeletons/{s.id}.skeleton" for s in samples]

    def write(item):
        path, sample = item
        write_skeleton_file(out / path, sample.sequence)

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        list(pool.map(write, zip(paths, samples)))
    DatasetManifest([SampleRecord(s.id, p, s.label, s.subject, s.camera) for s, p in zip(samples, paths)]).write(
        out / "dataset.csv")
    _write_config(out, config)
    print(f"wrote {len(samples)} sequences and {out / 'dataset.csv'}")
    return EXIT_OK


SUMMARY_FIELDS = ("id", "modality", "mean", "std", "min", "max")


def cmd_derive(args, config: RunConfig) -> int:
    out = Path(args.out)
    topo, dataset = _load_all(config, args.workers)
    (out / "modalities").mkdir(parents=True, exist_ok=True)

    def one(i):
        mods = derive_all(dataset.sequences[i], topo)
        blob = modality_blob(mods)
        (out / "modalities" / f"{dataset.ids[i]}.kmod").write_bytes(blob)
        return [(dataset.ids[i], k.value, m.data) for k, m in mods.items()]

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        per_sample = list(pool.map(one, range(len(dataset))))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for rows in per_sample:
        for sid, name, arr in rows:
            # statistics of the exported float32 values, so the summary describes the blobs exactly
            a = np.asarray(arr, dtype=np.float32).astype(np.float64)
            w.writerow([sid, name] + [repr(float(f(a))) for f in (np.mean, np.std, np.min, np.max)])
    _write(out / "summary.csv", buf.getvalue())
    _write_config(out, config)
    print(f"derived {len(dataset)} samples into {out / 'modalities'}")
    return EXIT_OK


def _load_all(config: RunConfig, workers: int):
    try:
        return pipeline.topology(config.data), pipeline.load_dataset(config.data, workers)
    except DatasetLoadError:
        raise
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None


def cmd_pretrain(args, config: RunConfig) -> int:
    out = Path(args.out)
    data = _prepare(config, args.workers)
    out.mkdir(parents=True, exist_ok=True)
    result = pipeline.run_pretrain(config, data, out)
    result.model.meta["config_hash"] = config.digest()
    result.model.save(out / "model.ckpt")
    _write(out / "metrics.csv", metrics_csv(result.metrics))
    _write_config(out, config)
    print(f"pretrained {', '.join(result.model.modalities)} on {len(data.train)} samples; "
          f"final loss {result.metrics[-1]['loss']:.4f}")
    return EXIT_OK


def _load_model(path: Path) -> MultiModalModel:
    try:
        return MultiModalModel.load(path)
    except (CheckpointError, ValueError, OSError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None


def cmd_distill(args, config: RunConfig) -> int:
    teacher_path = _require(args.teacher, "teacher checkpoint")
    out = Path(args.out)
    teacher = _load_model(teacher_path)
    data = _prepare(config, args.workers)
    out.mkdir(parents=True, exist_ok=True)
    result = pipeline.run_distill(config, teacher, data, out)
    if result.teacher_digest_before != result.teacher_digest_after:
        raise FloatingPointError("teacher parameters changed during distillation")
    result.students.meta["config_hash"] = config.digest()
    result.students.save(out / "student.ckpt")
    _write(out / "distill_metrics.csv", metrics_csv(result.metrics, DISTILL_FIELDS))
    _write_config(out, config)
    print(f"distilled {', '.join(result.students.modalities)}; final loss {result.metrics[-1]['loss']:.4f}")
    return EXIT_OK


def cmd_eval(args, config: RunConfig) -> int:
    ckpt = _require(args.checkpoint, "checkpoint")
    out = Path(args.out)
    model = _load_model(ckpt)
    data = _prepare(config, args.workers)
    report = pipeline.run_eval(config, model, data)
    doc = json.loads(report.to_json())
    doc["config_hash"] = config.digest()
    doc["checkpoint_kind"] = model.meta.get("kind", "")
    _write(out / "report.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write(out / "confusion.csv", report.confusion_csv())
    _write_config(out, config)
    for m, acc in report.top1.items():
        print(f"{m:18s} top-1 {100 * acc:6.2f}%")
    if report.fused_top1 is not None:
        print(f"{'fused':18s} top-1 {100 * report.fused_top1:6.2f}%")
    return EXIT_OK


def cmd_gradcheck(args, config: RunConfig) -> int:
    spec = SuiteSpec(seed=args.seed or 0, n_coords=args.coords, activation=config.pretrain.activation)
    reports = run_suite(spec)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("loss", "passed", "max_rel_error", "checked", "worst_block"))
    ok = True
    for name in LOSSES:
        r = reports[name]
        ok &= r.passed
        w.writerow((name, int(r.passed), f"{r.max_rel_error:.3e}", r.checked, r.worst[0] if r.worst else ""))
        print(f"{name:9s} {'PASS' if r.passed else 'FAIL'}  max rel. error {r.max_rel_error:.2e} "
              f"over {r.checked} coordinates")
    if args.out:
        _write(Path(args.out) / "gradcheck.csv", buf.getvalue())
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "generate": cmd_generate,
    "derive": cmd_derive,
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI run configuration")
    common.add_argument("--seed", type=int, metavar="N", help="training seed (pretrain, distill and probe)")
    common.add_argument("--workers", type=int, default=1, metavar="N", help="threads for per-file work")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config field")

    parser = argparse.ArgumentParser(prog="kinemod", description="Multi-modality skeleton contrastive learning")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic dataset as skeleton files + manifest")
    p = sub.add_parser("derive", parents=[common], help="export six-modality blobs and a summary CSV")
    p.add_argument("--data", metavar="MANIFEST", help="dataset manifest (default: synthetic from config)")
    p = sub.add_parser("pretrain", parents=[common], help="two-stage contrastive pretraining")
    p.add_argument("--data", metavar="MANIFEST")
    p = sub.add_parser("distill", parents=[common], help="distill a teacher into student modalities")
    p.add_argument("--teacher", metavar="CKPT", required=True)
    p.add_argument("--data", metavar="MANIFEST")
    p = sub.add_parser("eval", parents=[common], help="linear evaluation of a checkpoint")
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--data", metavar="MANIFEST")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all four losses")
    p.add_argument("--coords", type=int, default=200, help="sampled coordinates per loss")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("KINEMOD_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise UsageError("--workers must be at least 1")
        config = _resolve_config(args)
        return COMMANDS[args.command](args, config)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"kinemod {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetLoadError as exc:
        print(f"kinemod {args.command}: {len(exc.errors)} input file(s) failed:", file=sys.stderr)
        for err in exc.errors:
            print(f"  {err}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"kinemod {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"kinemod {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
