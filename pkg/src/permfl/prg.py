"""SplitMix64 generator and the shuffles built on it.

Every node in a run must derive the same coordinate buckets from a shared
seed, so the generator is fully specified here rather than delegated to
``random``/``numpy.random`` whose streams are version dependent.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB

# Substream separation constants (odd).
ROUND_STRIDE = 0xD1B54A32D192ED03
CLIENT_STRIDE = 0xAEF17502108EF2D9


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


class Prg:
    """SplitMix64 stream.

    A substream for round ``k`` starts at ``seed ^ (k * ROUND_STRIDE)``;
    per-client streams additionally xor in ``(client + 1) * CLIENT_STRIDE``.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int) -> None:
        self.state = seed & MASK64

    @classmethod
    def for_round(cls, seed: int, round: int, client: int | None = None) -> "Prg":
        state = (seed ^ (round * ROUND_STRIDE)) & MASK64
        if client is not None:
            state ^= ((client + 1) * CLIENT_STRIDE) & MASK64
        return cls(state)

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _mix(self.state)

    def u64_array(self, m: int) -> np.ndarray:
        """The next ``m`` outputs, identical to ``m`` calls of :meth:`next_u64`."""
        if m <= 0:
            return np.zeros(0, dtype=np.uint64)
        with np.errstate(over="ignore"):
            steps = np.arange(1, m + 1, dtype=np.uint64) * np.uint64(GOLDEN_GAMMA)
            z = steps + np.uint64(self.state)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + m * GOLDEN_GAMMA) & MASK64
        return z

    def uniform_array(self, m: int) -> np.ndarray:
        """``m`` doubles in [0, 1) from the top 53 bits of each output."""
        return (self.u64_array(m) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal_array(self, m: int) -> np.ndarray:
        """Standard normals by Box-Muller; consumes ``2 * ceil(m / 2)`` outputs."""
        pairs = (m + 1) // 2
        u = self.uniform_array(2 * pairs)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:m]

    def bounded(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError(f"bound must be positive, got {n}")
        threshold = (1 << 64) % n
        while True:
            r = self.next_u64()
            if r >= threshold:
                return r % n

    def _bounded_draws(self, bounds: np.ndarray) -> np.ndarray:
        # Vectorised path for Fisher-Yates; falls back to the scalar loop in
        # the (astronomically rare) event that any draw would be rejected so
        # the consumed stream is identical either way.
        saved = self.state
        raw = self.u64_array(len(bounds))
        thresholds = (np.uint64(0) - bounds) % bounds  # 2**64 mod b
        if np.all(raw >= thresholds):
            return raw % bounds
        self.state = saved
        return np.array([self.bounded(int(b)) for b in bounds], dtype=np.uint64)

    def shuffle(self, m: int) -> np.ndarray:
        """Fisher-Yates permutation of ``range(m)``.

        Positions are visited from ``m - 1`` down to ``1``; position ``i``
        swaps with ``bounded(i + 1)``.
        """
        perm = list(range(m))
        if m > 1:
            bounds = np.arange(m, 1, -1, dtype=np.uint64)
            draws = self._bounded_draws(bounds).tolist()
            for i, j in zip(range(m - 1, 0, -1), draws):
                perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)

    def sample_without_replacement(self, m: int, k: int) -> np.ndarray:
        """First ``k`` entries of a forward partial Fisher-Yates over ``range(m)``."""
        if not 0 <= k <= m:
            raise ValueError(f"cannot sample {k} of {m}")
        pool = list(range(m))
        if k:
            bounds = np.arange(m, m - k, -1, dtype=np.uint64)
            draws = self._bounded_draws(bounds).tolist()
            for i, r in enumerate(draws):
                j = i + r
                pool[i], pool[j] = pool[j], pool[i]
        return np.array(pool[:k], dtype=np.int64)
