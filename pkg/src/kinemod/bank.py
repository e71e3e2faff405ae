from __future__ import annotations

import numpy as np

UNIT_TOL = 1e-6


class MemoryBank:
    """Fixed-capacity FIFO queue of unit-norm embeddings.

    Rows come back oldest-first from :attr:`entries`; ``ids`` carries the
    sample id stored with each row so banks of different modalities can be
    checked for alignment.
    """

    def __init__(self, capacity: int, width: int):
        if capacity < 1 or width < 1:
            raise ValueError(f"capacity and width must be positive, got {capacity}, {width}")
        self.capacity = int(capacity)
        self.width = int(width)
        self._buf = np.zeros((self.capacity, self.width))
        self._ids = np.full(self.capacity, -1, dtype=np.int64)
        self.write_cursor = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    def enqueue(self, embeddings: np.ndarray, ids=None) -> None:
        emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if emb.shape[1] != self.width:
            raise ValueError(f"bank width is {self.width}, got embeddings of width {emb.shape[1]}")
        norms = np.linalg.norm(emb, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError(f"bank entries must be unit-norm; got norms in [{norms.min()}, {norms.max()}]")
        ids = np.full(len(emb), -1, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if len(ids) != len(emb):
            raise ValueError("one id per embedding required")
        # only the newest `capacity` rows can survive a large insert
        if len(emb) > self.capacity:
            self.write_cursor = (self.write_cursor + len(emb) - self.capacity) % self.capacity
            self.count = min(self.capacity, self.count + len(emb) - self.capacity)
            emb, ids = emb[-self.capacity:], ids[-self.capacity:]
        for row, sid in zip(emb, ids):
            self._buf[self.write_cursor] = row
            self._ids[self.write_cursor] = sid
            self.write_cursor = (self.write_cursor + 1) % self.capacity
            self.count = min(self.count + 1, self.capacity)

    def _order(self) -> np.ndarray:
        start = (self.write_cursor - self.count) % self.capacity
        return (start + np.arange(self.count)) % self.capacity

    @property
    def entries(self) -> np.ndarray:
        return self._buf[self._order()].copy()

    @property
    def ids(self) -> np.ndarray:
        return self._ids[self._order()].copy()

    def copy(self) -> "MemoryBank":
        other = MemoryBank(self.capacity, self.width)
        other._buf = self._buf.copy()
        other._ids = self._ids.copy()
        other.write_cursor, other.count = self.write_cursor, self.count
        return other


def as_negatives(bank) -> np.ndarray:
    """Accept a MemoryBank or a plain ``(K, D)`` array of negatives."""
    if isinstance(bank, MemoryBank):
        return bank.entries
    arr = np.asarray(bank, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, arr.shape[-1] if arr.ndim == 2 else 0)
    return np.atleast_2d(arr)
