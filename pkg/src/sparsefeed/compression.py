"""Sparsifying compressors and the message type that goes on the simulated wire."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CompressedMessage:
    """Sparse message; ``values`` already carry any d/k scaling."""

    d: int
    indices: np.ndarray
    values: np.ndarray
    k: int

    @property
    def entries(self):
        return list(zip(self.indices.tolist(), self.values.tolist()))

    def validate(self):
        idx = self.indices
        if len(idx) and (idx[0] < 0 or idx[-1] >= self.d):
            raise ValueError("index out of range")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("indices must be strictly increasing")
        if not len(idx) <= self.k <= self.d:
            raise ValueError(f"need len(entries) <= k <= d, got {len(idx)}, {self.k}, {self.d}")
        if len(self.values) != len(idx):
            raise ValueError("indices/values length mismatch")
        return self


def _check_k(k, d):
    if not 1 <= k <= d:
        raise ValueError(f"k must be in [1, d={d}], got {k}")


def random_subset(d: int, k: int, rng) -> np.ndarray:
    """Uniform size-k subset of range(d) by partial Fisher-Yates.

    Consumes exactly k uniforms from ``rng``; position i swaps with a uniform
    position in [i, d). Only touched positions are stored, so cost is O(k).
    """
    u = rng.random(k)
    swapped = {}
    out = np.empty(k, dtype=np.int64)
    for i in range(k):
        j = i + min(int(u[i] * (d - i)), d - i - 1)
        vi = swapped.get(i, i)
        vj = swapped.get(j, j)
        swapped[j] = vi
        out[i] = vj
    out.sort()
    return out


def rand_comp(x, k: int, rng=None, subset=None, replace=False) -> CompressedMessage:
    """Unbiased random-k sparsifier: keep k random coordinates, scale them by d/k.

    ``subset`` forces the kept coordinates (testing). ``replace=True`` draws k
    coordinates i.i.d. uniform instead; repeated draws add up, which keeps the
    estimator unbiased.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    _check_k(k, d)
    scale = d / k
    if subset is not None:
        idx = np.unique(np.asarray(subset, dtype=np.int64))
        if len(idx) != k:
            raise ValueError(f"forced subset must hold {k} distinct indices")
        return CompressedMessage(d, idx, scale * x[idx], k)
    if replace:
        draws = np.minimum((rng.random(k) * d).astype(np.int64), d - 1)
        idx, counts = np.unique(draws, return_counts=True)
        return CompressedMessage(d, idx, (scale * counts) * x[idx], k)
    idx = random_subset(d, k, rng)
    return CompressedMessage(d, idx, scale * x[idx], k)


def top_k(x, k: int) -> CompressedMessage:
    """Keep the k largest-magnitude coordinates verbatim; ties go to the lower index."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    _check_k(k, d)
    order = np.argsort(-np.abs(x), kind="stable")
    idx = np.sort(order[:k])
    return CompressedMessage(d, idx, x[idx].copy(), k)


def identity_message(x) -> CompressedMessage:
    """Dense, uncompressed message."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    return CompressedMessage(d, np.arange(d), x.copy(), d)


def densify(msg: CompressedMessage) -> np.ndarray:
    out = np.zeros(msg.d)
    out[msg.indices] = msg.values
    return out


def wire_entries(msg: CompressedMessage) -> int:
    """Scalar payload slots occupied by one message."""
    return min(len(msg.indices), msg.d)


def dump_message(msg: CompressedMessage, fh) -> None:
    """Debug dump, one ``index<TAB>value`` line per entry."""
    for i, v in zip(msg.indices.tolist(), msg.values.tolist()):
        fh.write(f"{i}\t{v!r}\n")
