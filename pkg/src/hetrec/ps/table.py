"""In-process embedding shard with lazy init, sparse optimizers and checkpoints."""

from __future__ import annotations

import math
import struct
import threading
from typing import Iterable

import numpy as np

from ..rng import combine_array

CKPT_MAGIC = b"G4RCKPT\x00"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIIQ")


class CheckpointError(ValueError):
    pass


def init_bound(dim: int) -> np.float32:
    """Largest float32 strictly inside ``1/sqrt(dim)``."""
    b = np.float32(1.0 / math.sqrt(dim))
    if float(b) >= 1.0 / math.sqrt(dim):
        b = np.nextafter(b, np.float32(0))
    return b


def lazy_init(keys, dim: int, init_seed: int) -> np.ndarray:
    """Initial vectors for ``keys``; a pure function of ``(init_seed, key)``.

    Coordinate ``j`` of key ``k``: ``u = splitmix64(h ^ j)`` with
    ``h = splitmix64(splitmix64(init_seed) ^ k)``, mapped to
    ``((u >> 11) + 0.5) * 2**-53`` in (0, 1), then to
    ``(2x - 1) / sqrt(dim)``, rounded to float32 and clipped to the open
    interval.
    """
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1)
    base = combine_array(combine_array(0, int(init_seed)), keys)
    u = combine_array(base[:, None], np.arange(dim, dtype=np.uint64)[None, :])
    x = ((u >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    v = ((2.0 * x - 1.0) / math.sqrt(dim)).astype(np.float32)
    b = init_bound(dim)
    return np.clip(v, -b, b)


class EmbeddingTable:
    """One shard of the key -> vector store.

    All mutation happens under a single lock, so every key's history is a
    serial sequence of init and optimizer steps.
    """

    def __init__(self, dim: int = 64, init_seed: int = 0, optimizer: str = "sgd", lr: float = 0.1,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if dim < 1:
            raise ValueError("dim must be positive")
        if optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown sparse optimizer {optimizer!r}")
        self.dim = dim
        self.init_seed = init_seed
        self.optimizer = optimizer
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._lock = threading.Lock()
        self._rows: dict[int, int] = {}
        self._data = np.zeros((16, dim), dtype=np.float32)
        if optimizer == "adam":
            self._m = np.zeros((16, dim), dtype=np.float32)
            self._v = np.zeros((16, dim), dtype=np.float32)
            self._t = np.zeros(16, dtype=np.int64)

    def __len__(self):
        return len(self._rows)

    def __contains__(self, key):
        return int(key) in self._rows

    def keys(self) -> list[int]:
        with self._lock:
            return list(self._rows)

    def _grow(self, need: int) -> None:
        cap = len(self._data)
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        self._data = np.resize(self._data, (cap, self.dim))
        if self.optimizer == "adam":
            self._m = np.resize(self._m, (cap, self.dim))
            self._v = np.resize(self._v, (cap, self.dim))
            self._t = np.resize(self._t, cap)

    def _rows_for(self, keys: list[int]) -> np.ndarray:
        rows = self._rows
        idx = [rows.get(k, -1) for k in keys]
        if -1 in idx:
            missing = list(dict.fromkeys(k for k, i in zip(keys, idx) if i == -1))
            start = len(rows)
            self._grow(start + len(missing))
            self._data[start:start + len(missing)] = lazy_init(missing, self.dim, self.init_seed)
            if self.optimizer == "adam":
                self._m[start:start + len(missing)] = 0
                self._v[start:start + len(missing)] = 0
                self._t[start:start + len(missing)] = 0
            for offset, k in enumerate(missing):
                rows[k] = start + offset
            idx = [rows[k] for k in keys]
        return np.asarray(idx, dtype=np.int64)

    def pull(self, keys: Iterable[int]) -> np.ndarray:
        keys = [int(k) for k in keys]
        with self._lock:
            idx = self._rows_for(keys)
            return self._data[idx]

    def push(self, keys: Iterable[int], grads, lr: float | None = None) -> None:
        keys = [int(k) for k in keys]
        grads = np.asarray(grads, dtype=np.float32)
        if grads.ndim != 2 or grads.shape != (len(keys), self.dim):
            raise ValueError(f"gradient shape {grads.shape} does not match ({len(keys)}, {self.dim})")
        lr = self.lr if lr is None else lr
        with self._lock:
            idx = self._rows_for(keys)
            if self.optimizer == "sgd":
                np.add.at(self._data, idx, -np.float32(lr) * grads)
            else:
                for i, g in zip(idx, grads):
                    self._adam_step(i, g, lr)

    def _adam_step(self, i: int, g: np.ndarray, lr: float) -> None:
        self._t[i] += 1
        t = self._t[i]
        self._m[i] = self.beta1 * self._m[i] + (1 - self.beta1) * g
        self._v[i] = self.beta2 * self._v[i] + (1 - self.beta2) * g * g
        m_hat = self._m[i] / (1 - self.beta1 ** t)
        v_hat = self._v[i] / (1 - self.beta2 ** t)
        self._data[i] -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(np.float32)

    def set(self, keys: Iterable[int], vectors) -> None:
        """Overwrite (or create) entries; used by checkpoint load and warm start."""
        keys = [int(k) for k in keys]
        vectors = np.asarray(vectors, dtype=np.float32).reshape(len(keys), self.dim)
        with self._lock:
            idx = self._rows_for(keys)
            self._data[idx] = vectors
            if self.optimizer == "adam":
                self._m[idx] = 0
                self._v[idx] = 0
                self._t[idx] = 0

    def items(self) -> tuple[np.ndarray, np.ndarray]:
        """Snapshot of all entries as ``(keys uint64, vectors float32)``."""
        with self._lock:
            keys = np.fromiter(self._rows.keys(), dtype=np.uint64, count=len(self._rows))
            rows = np.fromiter(self._rows.values(), dtype=np.int64, count=len(self._rows))
            return keys, self._data[rows].copy()

    def save(self, path) -> int:
        keys, vecs = self.items()
        return write_checkpoint(path, self.dim, keys, vecs)

    def load(self, path) -> int:
        keys, vecs = read_checkpoint(path, expect_dim=self.dim)
        self.set(keys.tolist(), vecs)
        return len(keys)


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("key", "<u8"), ("vec", "<f4", (dim,))])


def write_checkpoint(path, dim: int, keys: np.ndarray, vectors: np.ndarray) -> int:
    """Write entries sorted by key so equal tables give identical files."""
    keys = np.asarray(keys, dtype=np.uint64)
    order = np.argsort(keys, kind="stable")
    records = np.empty(len(keys), dtype=_record_dtype(dim))
    records["key"] = keys[order]
    records["vec"] = np.asarray(vectors, dtype=np.float32).reshape(len(keys), dim)[order]
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, dim, len(keys)))
        fh.write(records.tobytes())
    return len(keys)


def read_checkpoint(path, expect_dim: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, dim, count = _CKPT_HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if expect_dim is not None and dim != expect_dim:
        raise CheckpointError(f"{path}: checkpoint dim {dim} != table dim {expect_dim}")
    rec = _record_dtype(dim)
    body = data[_CKPT_HEADER.size:]
    if len(body) != count * rec.itemsize:
        raise CheckpointError(f"{path}: expected {count} records, file body has {len(body)} bytes")
    records = np.frombuffer(body, dtype=rec, count=count)
    return records["key"].copy(), records["vec"].copy()
