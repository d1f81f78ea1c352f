"""Correlated permutation compressor (PermK), RandK, and chunk assembly.

Indices never travel on the wire: every node re-derives them from the
shared seed, so a chunk payload is just its values in ascending-index order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from permfl.numkit import Precision
from permfl.prg import Prg


class UnsupportedRegime(ValueError):
    """PermK with fewer coordinates than clients."""


class ProtocolViolation(RuntimeError):
    """Chunks that should have disjoint supports overlap."""


@dataclass(frozen=True, eq=False)
class Assignment:
    d: int
    n: int
    round: int
    buckets: tuple[np.ndarray, ...]

    @property
    def owner(self) -> np.ndarray:
        """Client index owning each coordinate."""
        own = np.empty(self.d, dtype=np.int64)
        for i, b in enumerate(self.buckets):
            own[b] = i
        return own

    def sizes(self) -> list[int]:
        return [len(b) for b in self.buckets]


@dataclass(frozen=True, eq=False)
class SparseChunk:
    owner: int
    indices: np.ndarray
    values: np.ndarray
    scale_applied: bool = True

    def __post_init__(self) -> None:
        if len(self.indices) != len(self.values):
            raise ValueError("indices and values differ in length")
        if len(self.indices) > 1 and not np.all(np.diff(self.indices) > 0):
            raise ValueError("chunk indices must be strictly increasing")


def deal_buckets(z: np.ndarray, n: int, residual_clients: np.ndarray, round: int = 0) -> Assignment:
    """Split permutation ``z`` into ``n`` buckets.

    Blocks of ``d // n`` consecutive entries go to clients in order; the
    leftover tail entries go one each to ``residual_clients`` in scan order.
    """
    d = len(z)
    B = d // n
    t = d - n * B
    if len(residual_clients) != t:
        raise ValueError(f"need {t} residual clients, got {len(residual_clients)}")
    lists = [list(z[i * B : (i + 1) * B]) for i in range(n)]
    for k, s in enumerate(residual_clients):
        lists[int(s)].append(z[d - t + k])
    buckets = []
    for lst in lists:
        b = np.sort(np.asarray(lst, dtype=np.int64))
        b.setflags(write=False)
        buckets.append(b)
    return Assignment(d, n, round, tuple(buckets))


def sample_assignment(d: int, n: int, seed: int, round: int) -> Assignment:
    """PermK buckets for ``round``, identical on every node sharing ``seed``."""
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if d < n:
        raise UnsupportedRegime(f"PermK requires d >= n (d={d}, n={n})")
    prg = Prg.for_round(seed, round)
    z = prg.shuffle(d)
    t = d - n * (d // n)
    residual = prg.shuffle(n)[:t] if t else np.zeros(0, dtype=np.int64)
    return deal_buckets(z, n, residual, round)


def compress_permk(v: np.ndarray, a: Assignment, i: int) -> SparseChunk:
    if v.shape != (a.d,):
        raise ValueError(f"vector has shape {v.shape}, expected ({a.d},)")
    if not 0 <= i < a.n:
        raise IndexError(f"client {i} out of range for n={a.n}")
    idx = a.buckets[i]
    return SparseChunk(i, idx, v[idx] * v.dtype.type(a.n))


def randk_indices(d: int, k: int, prg: Prg) -> np.ndarray:
    if not 1 <= k <= d:
        raise ValueError(f"RandK needs 1 <= k <= d, got k={k}, d={d}")
    idx = np.sort(prg.sample_without_replacement(d, k))
    idx.setflags(write=False)
    return idx


def compress_randk(v: np.ndarray, k: int, prg: Prg, owner: int = 0) -> SparseChunk:
    idx = randk_indices(len(v), k, prg)
    scale = v.dtype.type(len(v) / k)
    return SparseChunk(owner, idx, v[idx] * scale)


def compress_identity(v: np.ndarray, owner: int = 0) -> SparseChunk:
    idx = np.arange(len(v), dtype=np.int64)
    return SparseChunk(owner, idx, v.copy(), scale_applied=False)


def assemble(chunks: list[SparseChunk], d: int, n: int, overlap: bool = False,
             dtype: np.dtype | type = np.float64) -> np.ndarray:
    """``(1/n) * sum_i scatter(chunk_i)``.

    With ``overlap=False`` (PermK) the chunk supports must be disjoint, so the
    sum is a pure placement of values; a repeated coordinate raises
    :class:`ProtocolViolation`.
    """
    dtype = chunks[0].values.dtype if chunks else np.dtype(dtype)
    out = np.zeros(d, dtype=dtype)
    if not chunks:
        return out
    if overlap:
        # indices are unique within a chunk, so fancy-index += is exact
        for c in chunks:
            out[c.indices] += c.values
    else:
        seen = np.zeros(d, dtype=bool)
        for c in chunks:
            if seen[c.indices].any():
                raise ProtocolViolation(f"chunk from client {c.owner} overlaps an earlier chunk")
            seen[c.indices] = True
            out[c.indices] = c.values
    return out / dtype.type(n)


def encode_payload(values: np.ndarray, precision: Precision) -> bytes:
    """Chunk values as little-endian scalars; the count is implied by the length."""
    return np.ascontiguousarray(values, dtype=precision.dtype).tobytes()


def decode_payload(payload: bytes, precision: Precision) -> np.ndarray:
    if len(payload) % precision.nbytes:
        raise ValueError(f"payload of {len(payload)} bytes is not a whole number of {precision.value} scalars")
    return np.frombuffer(payload, dtype=precision.dtype).astype(precision.work_dtype)
