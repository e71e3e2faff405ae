"""Linear evaluation over frozen encoder features, stream fusion and kNN retrieval."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .engine import SGD, step_schedule


@dataclass
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.1
    lr_steps: tuple[int, ...] = (80,)
    lr_decay: float = 0.1
    batch_size: int = 16
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        self.lr_steps = tuple(int(e) for e in self.lr_steps)


@dataclass
class LinearProbe:
    """Softmax classifier on (optionally standardized) frozen features."""

    weights: np.ndarray  # (num_classes, d_f)
    bias: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.mean) / self.std) @ self.weights.T + self.bias

    def scores(self, features: np.ndarray) -> np.ndarray:
        return softmax(self.logits(features))

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def train_probe_features(
    features: np.ndarray,
    labels: np.ndarray,
    config: ProbeConfig = ProbeConfig(),
    num_classes: int | None = None,
) -> LinearProbe:
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("cannot train a probe on an empty dataset")
    if len(np.unique(y)) < 2:
        raise ValueError("probe training needs at least two classes")
    C = int(num_classes if num_classes is not None else y.max() + 1)
    if config.standardize:
        mean, std = X.mean(axis=0), X.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
    else:
        mean, std = np.zeros(X.shape[1]), np.ones(X.shape[1])
    Xs = (X - mean) / std
    params = {"w": np.zeros((C, X.shape[1])), "b": np.zeros(C)}
    opt = SGD(params, config.sgd_momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    onehot = np.eye(C)[y]
    for epoch in range(config.epochs):
        lr = step_schedule(config.lr, epoch, config.epochs, config.lr_steps, config.lr_decay)
        perm = rng.permutation(len(X))
        for start in range(0, len(X), config.batch_size):
            idx = perm[start:start + config.batch_size]
            p = softmax(Xs[idx] @ params["w"].T + params["b"])
            d = (p - onehot[idx]) / len(idx)
            opt.step({"w": d.T @ Xs[idx], "b": d.sum(axis=0)}, lr)
    return LinearProbe(params["w"], params["b"], mean, std)


def train_probe(stack, arrays: np.ndarray, labels, config: ProbeConfig = ProbeConfig(), norm=None,
                num_classes: int | None = None) -> LinearProbe:
    """Fit a probe on the frozen query features of one encoder stack.

    ``norm`` is the stack's fitted input normalization (anything with
    ``apply``); without it the arrays are fed as they are.
    """
    x = arrays if norm is None else norm.apply(arrays)
    return train_probe_features(stack.encode_batch(x), labels, config, num_classes)


@dataclass
class EvalReport:
    top1: dict[str, float]
    confusion: dict[str, np.ndarray]
    fused_top1: float | None = None
    knn_precision: dict[str, float] = field(default_factory=dict)
    knn_k: int | None = None
    count: int = 0

    def to_json(self) -> str:
        doc = {
            "format": "kinemod-eval 1",
            "count": self.count,
            "top1": self.top1,
            "fused_top1": self.fused_top1,
            "knn_k": self.knn_k,
            "knn_precision": self.knn_precision,
            "confusion": {k: v.tolist() for k, v in self.confusion.items()},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def confusion_csv(self, stream: str | None = None) -> str:
        stream = stream or ("fused" if "fused" in self.confusion else next(iter(self.confusion)))
        mat = self.confusion[stream]
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["true\\pred"] + list(range(mat.shape[1])))
        for i, row in enumerate(mat):
            w.writerow([i] + [int(v) for v in row])
        return out.getvalue()


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> np.ndarray:
    mat = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(mat, (labels, preds), 1)
    return mat


def _accuracy(mat: np.ndarray) -> float:
    return float(np.trace(mat) / mat.sum())


def evaluate(
    probes: Mapping[str, LinearProbe],
    features: Mapping[str, np.ndarray],
    labels,
    fusion: bool = True,
    weights: Mapping[str, float] | None = None,
) -> EvalReport:
    """Per-stream top-1 and, with ``fusion``, top-1 of the (weighted) mean softmax score."""
    y = np.asarray(labels, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    streams = list(probes)
    C = max(p.num_classes for p in probes.values())
    top1, conf, scores = {}, {}, {}
    for m in streams:
        scores[m] = probes[m].scores(features[m])
        conf[m] = confusion_matrix(y, scores[m].argmax(axis=1), C)
        top1[m] = _accuracy(conf[m])
    fused = None
    if fusion:
        w = {m: 1.0 for m in streams} if weights is None else dict(weights)
        total = sum(w[m] for m in streams)
        avg = sum(w[m] * scores[m] for m in streams) / total
        conf["fused"] = confusion_matrix(y, avg.argmax(axis=1), C)
        fused = _accuracy(conf["fused"])
    return EvalReport(top1, conf, fused, count=len(y))


def knn_precision(features: np.ndarray, labels, k: int) -> float:
    """Mean fraction of the k cosine-nearest other samples that share the label."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= len(X):
        raise ValueError(f"k={k} must be smaller than the dataset size {len(X)}")
    Xn = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
    sim = Xn @ Xn.T
    np.fill_diagonal(sim, -np.inf)
    nn = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    return float(np.mean(y[nn] == y[:, None]))


def knn_report(features: Mapping[str, np.ndarray], labels, k: int) -> dict[str, float]:
    return {m: knn_precision(f, labels, k) for m, f in features.items()}


def linear_eval(
    train_features: Mapping[str, np.ndarray],
    train_labels,
    eval_features: Mapping[str, np.ndarray],
    eval_labels,
    config: ProbeConfig = ProbeConfig(),
    fusion: bool = True,
    knn_k: int | None = None,
    streams: Sequence[str] | None = None,
) -> tuple[dict[str, LinearProbe], EvalReport]:
    """Fit one probe per stream on the train split, report on the eval split."""
    streams = list(streams or train_features)
    C = int(max(np.max(train_labels), np.max(eval_labels)) + 1)
    probes = {m: train_probe_features(train_features[m], train_labels, config, C) for m in streams}
    report = evaluate(probes, {m: eval_features[m] for m in streams}, eval_labels, fusion)
    if knn_k is not None:
        report.knn_k = knn_k
        report.knn_precision = knn_report({m: eval_features[m] for m in streams}, eval_labels, knn_k)
    return probes, report
