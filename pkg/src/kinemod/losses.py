"""Contrastive objectives over a queue of negatives.

All losses here are batch means of per-sample terms and return the gradient
with respect to the anchor embeddings only; positives, negatives and mined
weights come from key encoders or other modalities and are treated as
constants (stop-gradient), as in momentum-contrast training.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .bank import MemoryBank, as_negatives
from .encoder import normalize


def nce_batch(anchors, positives, negatives, tau: float, mined_idx=None, mined_w=None):
    """Per-sample InfoNCE with optional weighted extra positives.

    Sample ``b`` scores ``l0 = a.p / tau`` against ``l_k = a.n_k / tau``;
    the loss is ``LSE(l0, l_1..l_K) - log(exp(l0) + sum_j w_j exp(l_{idx_j}))``.
    Returns ``(losses (B,), d_loss/d_anchors (B, D))`` for the unreduced sum.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    a = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    p = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    n = negatives
    if a.shape != p.shape:
        raise ValueError(f"anchor shape {a.shape} != positive shape {p.shape}")
    if n.shape[0] and n.shape[1] != a.shape[1]:
        raise ValueError(f"negatives have width {n.shape[1]}, anchors {a.shape[1]}")
    l0 = np.sum(a * p, axis=1) / tau
    ln = a @ n.T / tau if n.shape[0] else np.zeros((a.shape[0], 0))
    logits = np.concatenate([l0[:, None], ln], axis=1)
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    den = e.sum(axis=1)
    soft = e / den[:, None]
    numer_w = np.zeros_like(e)
    numer_w[:, 0] = 1.0
    if mined_idx is not None and mined_idx.shape[1]:
        rows = np.arange(a.shape[0])[:, None]
        np.add.at(numer_w, (rows, mined_idx + 1), mined_w)
    num_terms = numer_w * e
    num = num_terms.sum(axis=1)
    losses = np.log(den) - np.log(num)
    dlogits = soft - num_terms / num[:, None]
    grad = (dlogits[:, :1] * p + (dlogits[:, 1:] @ n if n.shape[0] else 0.0)) / tau
    return losses, grad


def info_nce(anchor, positive, bank, tau: float = 0.07) -> float:
    """InfoNCE of one anchor (or the mean over a batch of anchors)."""
    negs = as_negatives(bank)
    if negs.shape[0] == 0:
        warnings.warn("InfoNCE with an empty bank is degenerate; loss is 0", RuntimeWarning, stacklevel=2)
        negs = np.zeros((0, np.shape(anchor)[-1]))
    losses, _ = nce_batch(anchor, positive, negs, tau)
    return float(losses.mean())


def info_nce_grad(anchors, positives, bank, tau: float = 0.07):
    """Batch-mean InfoNCE and its gradient w.r.t. the anchors."""
    negs = as_negatives(bank)
    if negs.shape[0] == 0:
        negs = np.zeros((0, np.shape(anchors)[-1]))
    losses, grad = nce_batch(anchors, positives, negs, tau)
    B = losses.shape[0]
    return float(losses.mean()), grad / B


@dataclass
class BatchState:
    """Embeddings of one batch, keyed by modality name in a fixed order.

    ``z``: query g-head outputs (c_z); ``z_tilde``: query g~-head outputs
    (n*c_z); ``z_key``: key-encoder g-head outputs (c_z).
    """

    z: dict[str, np.ndarray]
    z_tilde: dict[str, np.ndarray] = field(default_factory=dict)
    z_key: dict[str, np.ndarray] = field(default_factory=dict)
    ids: np.ndarray | None = None

    @property
    def modalities(self) -> list[str]:
        return list(self.z_key or self.z)

    @property
    def z_c(self) -> np.ndarray:
        return concat_keys(self.z_key, self.modalities)


def concat_keys(z_key: dict[str, np.ndarray], order) -> np.ndarray:
    order = list(order)
    if len(order) == 1:
        # a single key embedding is already unit-norm; re-normalizing would only add rounding
        return np.array(z_key[order[0]], dtype=np.float64)
    return normalize(np.concatenate([z_key[m] for m in order], axis=1))


def ikem_terms(batch: BatchState, bank_c, tau: float = 0.07):
    """Per-modality InfoNCE(z~_u, z^_c, M_c) and gradients w.r.t. each z~_u."""
    zc = batch.z_c
    negs = as_negatives(bank_c)
    if negs.shape[0] and negs.shape[1] != zc.shape[1]:
        raise ValueError(f"concatenated bank width {negs.shape[1]} != n*c_z = {zc.shape[1]}")
    terms, grads = {}, {}
    for u in batch.modalities:
        if batch.z_tilde[u].shape[1] != zc.shape[1]:
            raise ValueError(f"z~ of {u} has width {batch.z_tilde[u].shape[1]}, expected {zc.shape[1]}")
        terms[u], grads[u] = info_nce_grad(batch.z_tilde[u], zc, negs, tau)
    return terms, grads


def ikem_loss_grad(batch: BatchState, bank_c, tau: float = 0.07):
    terms, grads = ikem_terms(batch, bank_c, tau)
    return sum(terms.values()), grads


def ikem_loss(batch: BatchState, bank_c: MemoryBank, tau: float = 0.07, enqueue: bool = True) -> float:
    loss, _ = ikem_loss_grad(batch, bank_c, tau)
    if enqueue:
        bank_c.enqueue(batch.z_c, batch.ids)
    return loss


def mine_positives(z_v: np.ndarray, negatives_v: np.ndarray, topk: int, tau: float = 0.07):
    """Indices of the ``topk`` bank entries most similar to ``z_v`` and their softmax weights."""
    B = z_v.shape[0]
    if topk <= 0 or negatives_v.shape[0] == 0:
        return np.zeros((B, 0), dtype=np.int64), np.zeros((B, 0))
    k = min(topk, negatives_v.shape[0])
    sims = z_v @ negatives_v.T / tau
    idx = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    sims = sims - sims.max(axis=1, keepdims=True)
    soft = np.exp(sims)
    soft /= soft.sum(axis=1, keepdims=True)
    return idx, np.take_along_axis(soft, idx, axis=1)


def _bank_arrays(banks, order):
    negs = {u: as_negatives(banks[u]) for u in order}
    sizes = {u: n.shape[0] for u, n in negs.items()}
    if len(set(sizes.values())) > 1:
        raise ValueError(f"per-modality banks have unequal lengths: {sizes}")
    if all(isinstance(banks[u], MemoryBank) for u in order):
        ids = [banks[u].ids for u in order]
        if any(not np.array_equal(ids[0], other) for other in ids[1:]):
            raise ValueError("per-modality banks are not aligned by sample id")
    return negs


def ekem_terms(batch: BatchState, banks, tau: float = 0.07, topk: int = 1, mined=None):
    """Cross-modal positive mining objective, one term per modality.

    For each ordered pair (u, v), the ``topk`` bank entries closest to the
    sample under modality v join modality u's numerator, weighted by v's
    softmax similarity. Modality u's term averages over its partners v, so
    ``topk = 0`` reduces exactly to per-modality InfoNCE.
    ``mined`` pins the (indices, weights) per pair; otherwise they are mined
    here and returned so callers can hold them fixed.
    """
    order = batch.modalities
    negs = _bank_arrays(banks, order)
    if mined is None:
        mined = {}
        if topk > 0:
            for u in order:
                for v in order:
                    if u != v:
                        mined[(u, v)] = mine_positives(batch.z[v], negs[v], topk, tau)
    terms, grads = {}, {}
    for u in order:
        partners = [v for v in order if v != u]
        if topk <= 0 or not partners or negs[u].shape[0] == 0:
            terms[u], grads[u] = info_nce_grad(batch.z[u], batch.z_key[u], negs[u], tau)
            continue
        B = batch.z[u].shape[0]
        acc_loss, acc_grad = 0.0, np.zeros_like(batch.z[u])
        for v in partners:
            idx, w = mined[(u, v)]
            losses, g = nce_batch(batch.z[u], batch.z_key[u], negs[u], tau, idx, w)
            acc_loss += losses.mean()
            acc_grad += g / B
        terms[u] = float(acc_loss / len(partners))
        grads[u] = acc_grad / len(partners)
    return terms, grads, mined


def ekem_loss_grad(batch: BatchState, banks, tau: float = 0.07, topk: int = 1, mined=None):
    terms, grads, mined = ekem_terms(batch, banks, tau, topk, mined)
    return sum(terms.values()), grads, mined


def ekem_loss(batch: BatchState, banks, tau: float = 0.07, topk: int = 1) -> float:
    loss, _, _ = ekem_loss_grad(batch, banks, tau, topk)
    return loss
