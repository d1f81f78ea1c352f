"""Size and traffic model for CKKS ciphertexts at the AES-128-equivalent level.

No homomorphic arithmetic happens here; the functions only count bytes so
the encrypted-PermK traffic can be compared against a CKKS deployment.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable

from permfl.numkit import Precision
from permfl.secenv import OVERHEAD_BYTES

DEFAULT_N = 16_384
DEFAULT_Q_BITS = 210  # (60, 30, 30, 30, 60) modulus chain
STRICT_Q_BITS = 438


@dataclass(frozen=True)
class CkksParams:
    poly_degree: int
    q_bits: int

    def __post_init__(self) -> None:
        N = self.poly_degree
        if N < 1 or N & (N - 1):
            raise ValueError(f"polynomial degree must be a power of two, got {N}")
        if self.q_bits <= 0:
            raise ValueError(f"q_bits must be positive, got {self.q_bits}")

    @property
    def slots(self) -> int:
        return self.poly_degree // 2

    @property
    def aes128_equivalent(self) -> bool:
        return self.poly_degree >= DEFAULT_N


def aes128_equivalent_params(strict: bool = False) -> CkksParams:
    return CkksParams(DEFAULT_N, STRICT_Q_BITS if strict else DEFAULT_Q_BITS)


def key_size_bytes(p: CkksParams) -> int:
    return math.ceil(p.poly_degree * p.q_bits / 8)


def ciphertext_chunks(d: int, p: CkksParams) -> int:
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    return math.ceil(d / p.slots)


def ciphertext_bytes(d: int, p: CkksParams, nonzeros: int | None = None) -> int:
    """Bytes of the fresh ciphertexts encoding a length-``d`` vector.

    ``nonzeros`` is accepted and ignored: the encoding is dense, so a sparse
    input costs exactly as much as a dense one.
    """
    del nonzeros
    return ciphertext_chunks(d, p) * math.ceil(2 * p.poly_degree * p.q_bits / 8)


@dataclass(frozen=True)
class CkksTraffic:
    up: int
    down: int
    key: int


def ckks_traffic_per_round(d: int, n: int, p: CkksParams) -> CkksTraffic:
    """Per-client bytes; the master returns one aggregated ciphertext."""
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    c = ciphertext_bytes(d, p)
    return CkksTraffic(c, c, key_size_bytes(p))


def master_memory_bytes(d: int, n: int, p: CkksParams) -> int:
    return n * ciphertext_bytes(d, p)


def aes_envelope_bytes(d: int, precision: Precision = Precision.FP64) -> int:
    """Nonce + tag + payload for a dense vector, without the framing header."""
    return d * Precision(precision).nbytes + OVERHEAD_BYTES


CSV_COLUMNS = ("d", "N", "q_bits", "up_bytes", "down_bytes", "key_bytes", "aes_envelope_bytes", "ratio")


def cost_table(dims: Iterable[int], n: int, p: CkksParams,
               precision: Precision = Precision.FP64) -> list[dict]:
    rows = []
    for d in dims:
        t = ckks_traffic_per_round(d, n, p)
        aes = aes_envelope_bytes(d, precision)
        rows.append({"d": d, "N": p.poly_degree, "q_bits": p.q_bits, "up_bytes": t.up,
                     "down_bytes": t.down, "key_bytes": t.key, "aes_envelope_bytes": aes,
                     "ratio": round(t.up / aes, 3)})
    return rows


def cost_table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
