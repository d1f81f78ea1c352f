"""Synthetic least-squares problems split across clients.

Client ``i`` holds ``(A_i, b_i)`` and the objective is::

    f(x) = (1/n) * sum_i w_i * (1/n_i) * ||A_i x - b_i||^2
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from permfl.prg import Prg

POWER_TOL = 1e-6
POWER_MAX_ITERS = 10_000
PROBLEM_MAGIC = b"PFL1"


class GenerationError(RuntimeError):
    """Problem generation could not meet its smoothness target."""


class Precision(str, enum.Enum):
    FP16 = "fp16"
    FP32 = "fp32"
    FP64 = "fp64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype({"fp16": "<f2", "fp32": "<f4", "fp64": "<f8"}[self.value])

    @property
    def nbytes(self) -> int:
        return self.dtype.itemsize

    @property
    def bits(self) -> int:
        return 8 * self.dtype.itemsize

    @property
    def work_dtype(self) -> np.dtype:
        # Half precision is emulated: arithmetic in float32, every result
        # rounded through float16.
        return np.dtype(np.float32) if self is Precision.FP16 else self.dtype

    def round(self, a: np.ndarray) -> np.ndarray:
        """Round ``a`` to storage precision, returned in the working dtype."""
        if self is Precision.FP16:
            return np.asarray(a, dtype=np.float32).astype(np.float16).astype(np.float32)
        return np.asarray(a, dtype=self.dtype)


@dataclass(frozen=True, eq=False)
class ClientData:
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        if self.A.ndim != 2 or self.A.shape[0] < 1:
            raise ValueError(f"A_i must be a non-empty matrix, got shape {self.A.shape}")
        if self.b.shape != (self.A.shape[0],):
            raise ValueError(f"b_i must have {self.A.shape[0]} entries, got {self.b.shape}")

    @property
    def n_i(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True, eq=False)
class Problem:
    clients: tuple[ClientData, ...]
    l_smooth: float
    x_fixed: np.ndarray | None = None
    weights: tuple[float, ...] | None = None
    _cast: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.clients:
            raise ValueError("a problem needs at least one client")
        d = self.clients[0].A.shape[1]
        if any(c.A.shape[1] != d for c in self.clients):
            raise ValueError("all A_i must share the same column count")
        if not self.l_smooth > 0:
            raise ValueError(f"l_smooth must be positive, got {self.l_smooth}")
        if self.weights is None:
            object.__setattr__(self, "weights", (1.0,) * len(self.clients))
        elif len(self.weights) != len(self.clients):
            raise ValueError("one weight per client required")
        for c in self.clients:
            c.A.setflags(write=False)
            c.b.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.clients)

    @property
    def d(self) -> int:
        return self.clients[0].A.shape[1]

    @property
    def interpolation(self) -> bool:
        return self.x_fixed is not None

    def client_arrays(self, i: int, precision: Precision) -> tuple[np.ndarray, np.ndarray]:
        """``(A_i, b_i)`` rounded to ``precision`` (cached)."""
        key = (i, precision)
        if key not in self._cast:
            c = self.clients[i]
            self._cast[key] = (precision.round(c.A), precision.round(c.b))
        return self._cast[key]


def _hessian_matvec(blocks: list[np.ndarray], coefs: list[float], v: np.ndarray) -> np.ndarray:
    out = np.zeros_like(v)
    for A, c in zip(blocks, coefs):
        out += c * (A.T @ (A @ v))
    return out


def _hessian_coefs(n_is: list[int], weights: tuple[float, ...]) -> list[float]:
    n = len(n_is)
    return [2.0 * w / (n * m) for m, w in zip(n_is, weights)]


def largest_eigenvalue(
    blocks: list[np.ndarray],
    coefs: list[float],
    start: np.ndarray,
    tol: float = POWER_TOL,
    max_iters: int = POWER_MAX_ITERS,
) -> float:
    """Power iteration on ``sum_i c_i A_i^T A_i`` from a fixed start vector."""
    v = start / np.linalg.norm(start)
    lam = 0.0
    for _ in range(max_iters):
        w = _hessian_matvec(blocks, coefs, v)
        lam_new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            raise GenerationError("Hessian annihilated the start vector")
        v = w / norm
        if lam_new > 0 and abs(lam_new - lam) <= tol * lam_new:
            return lam_new
        lam = lam_new
    raise GenerationError(f"power iteration did not converge in {max_iters} iterations")


def hessian(p: Problem) -> np.ndarray:
    """Dense ``d x d`` Hessian of ``f``; only sensible for small ``d``."""
    H = np.zeros((p.d, p.d))
    coefs = _hessian_coefs([c.n_i for c in p.clients], p.weights)
    for c, coef in zip(p.clients, coefs):
        H += coef * (c.A.T @ c.A)
    return H


def _orthonormal(prg: Prg, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(prg.normal_array(rows * cols).reshape(rows, cols))
    return q * np.sign(np.diag(r))


def generate_problem(
    seed: int,
    d: int,
    n: int,
    n_i: int | list[int],
    l_target: float = 10.0,
    interpolation: bool = True,
    spectrum: str = "exact",
    l_min: float = 1.0,
    weights: tuple[float, ...] | None = None,
) -> Problem:
    """Draw a reproducible problem whose smoothness constant is ``l_target``.

    ``spectrum="scaled"`` fills every ``A_i`` with U[0, 1) entries and rescales
    all blocks by one scalar so the top Hessian eigenvalue hits ``l_target``.
    ``spectrum="exact"`` instead builds the stacked matrix from orthonormal
    factors so the nonzero Hessian eigenvalues are evenly spaced on
    ``[l_min, l_target]``.
    """
    sizes = [n_i] * n if isinstance(n_i, int) else list(n_i)
    if d < 1 or n < 1 or len(sizes) != n or min(sizes) < 1:
        raise ValueError(f"invalid shape d={d}, n={n}, n_i={n_i}")
    if not l_target > 0:
        raise ValueError(f"l_target must be positive, got {l_target}")
    weights = (1.0,) * n if weights is None else tuple(weights)
    coefs = _hessian_coefs(sizes, weights)
    prg = Prg(seed)

    if spectrum == "scaled":
        blocks = [prg.uniform_array(m * d).reshape(m, d) for m in sizes]
        start = prg.uniform_array(d) + 0.5
        lam = largest_eigenvalue(blocks, coefs, start)
        scale = np.sqrt(l_target / lam)
        blocks = [A * scale for A in blocks]
    elif spectrum == "exact":
        total = sum(sizes)
        rank = min(total, d)
        if not 0 < l_min <= l_target:
            raise ValueError("need 0 < l_min <= l_target")
        eig = np.linspace(l_min, l_target, rank) if rank > 1 else np.array([l_target])
        U = _orthonormal(prg, total, rank)
        V = _orthonormal(prg, d, rank)
        M = (U * np.sqrt(eig)) @ V.T  # M^T M has spectrum `eig`
        blocks, row = [], 0
        for m, coef in zip(sizes, coefs):
            blocks.append(M[row : row + m] / np.sqrt(coef))
            row += m
    else:
        raise ValueError(f"unknown spectrum mode {spectrum!r}")

    if interpolation:
        x_fixed = prg.uniform_array(d)
        bs = [A @ x_fixed for A in blocks]
    else:
        x_fixed = None
        bs = [prg.uniform_array(m) for m in sizes]
    if x_fixed is not None:
        x_fixed.setflags(write=False)
    clients = tuple(ClientData(A, b) for A, b in zip(blocks, bs))
    return Problem(clients, float(l_target), x_fixed, weights)


def gradient(p: Problem, i: int, x: np.ndarray, precision: Precision = Precision.FP64) -> np.ndarray:
    """``(2 w_i / n_i) A_i^T (A_i x - b_i)`` evaluated at ``precision``."""
    if not 0 <= i < p.n:
        raise IndexError(f"client {i} out of range for n={p.n}")
    if x.shape != (p.d,):
        raise ValueError(f"x has shape {x.shape}, expected ({p.d},)")
    A, b = p.client_arrays(i, precision)
    rnd = precision.round
    x = np.asarray(x, dtype=precision.work_dtype)
    residual = rnd(A @ x - b)
    coef = 2.0 * p.weights[i] / p.clients[i].n_i
    return rnd(coef * rnd(A.T @ residual))


def client_objective(p: Problem, i: int, x: np.ndarray) -> float:
    c = p.clients[i]
    r = c.A @ np.asarray(x, dtype=np.float64) - c.b
    return p.weights[i] * float(r @ r) / c.n_i


def objective_and_gradnorm(p: Problem, x: np.ndarray) -> tuple[float, float]:
    """``(f(x), ||grad f(x)||^2)`` in float64 regardless of run precision."""
    if x.shape != (p.d,):
        raise ValueError(f"x has shape {x.shape}, expected ({p.d},)")
    x = np.asarray(x, dtype=np.float64)
    fx = 0.0
    g = np.zeros(p.d)
    for i in range(p.n):
        fx += client_objective(p, i, x)
        g += gradient(p, i, x)
    fx /= p.n
    g /= p.n
    return fx, float(g @ g)


def theoretical_step(l_smooth: float) -> float:
    if not l_smooth > 0:
        raise ValueError(f"l_smooth must be positive, got {l_smooth}")
    return 1.0 / l_smooth


def save_problem(p: Problem, path: str | Path) -> None:
    """Little-endian dump: ``PFL1``, u32 d, u32 n, then per client u32 n_i, A_i, b_i (f64)."""
    with Path(path).open("wb") as fh:
        fh.write(PROBLEM_MAGIC + struct.pack("<II", p.d, p.n))
        for c in p.clients:
            fh.write(struct.pack("<I", c.n_i))
            fh.write(np.ascontiguousarray(c.A, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(c.b, dtype="<f8").tobytes())


def load_problem(path: str | Path) -> Problem:
    """Inverse of :func:`save_problem`; ``l_smooth`` is recomputed, ``x_fixed`` is not stored."""
    raw = Path(path).read_bytes()
    if raw[:4] != PROBLEM_MAGIC:
        raise ValueError("not a PFL1 problem file")
    d, n = struct.unpack_from("<II", raw, 4)
    off = 12
    clients = []
    for _ in range(n):
        (m,) = struct.unpack_from("<I", raw, off)
        off += 4
        A = np.frombuffer(raw, dtype="<f8", count=m * d, offset=off).reshape(m, d).astype(np.float64)
        off += 8 * m * d
        b = np.frombuffer(raw, dtype="<f8", count=m, offset=off).astype(np.float64)
        off += 8 * m
        clients.append(ClientData(A, b))
    if off != len(raw):
        raise ValueError(f"{len(raw) - off} trailing bytes in problem file")
    blocks = [c.A for c in clients]
    coefs = _hessian_coefs([c.n_i for c in clients], (1.0,) * n)
    lam = largest_eigenvalue(blocks, coefs, Prg(0).uniform_array(d) + 0.5)
    return Problem(tuple(clients), lam)
