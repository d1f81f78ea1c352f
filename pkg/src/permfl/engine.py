"""Round-level protocol drivers, replicated iterates, and traffic accounting.

Every client holds its own copy of the iterate. For the encrypted variants
the master is a concatenate-and-forward hub that only sees envelopes; for
the plain variants it averages what it receives and broadcasts the mean.
"""

from __future__ import annotations

import enum
import functools
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from permfl import secenv
from permfl.compress import (
    Assignment,
    SparseChunk,
    assemble,
    compress_identity,
    compress_permk,
    decode_payload,
    encode_payload,
    randk_indices,
    sample_assignment,
)
from permfl.numkit import Precision, Problem, gradient, objective_and_gradnorm
from permfl.prg import Prg
from permfl.secenv import Envelope, Header, ReplayGuard, SecretKey

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e12


class Algorithm(str, enum.Enum):
    GD = "gd"
    GD_AES = "gd_aes"
    DCGD_RANDK = "dcgd_randk"
    DCGD_RANDK_AES = "dcgd_randk_aes"
    DCGD_PERMK = "dcgd_permk"
    DCGD_PERMK_AES = "dcgd_permk_aes"
    FEDAVG = "fedavg"

    @property
    def encrypted(self) -> bool:
        return self.value.endswith("_aes")

    @property
    def compressor(self) -> str:
        if "permk" in self.value:
            return "permk"
        if "randk" in self.value:
            return "randk"
        return "identity"

    @property
    def plain_counterpart(self) -> "Algorithm":
        return Algorithm(self.value.removesuffix("_aes"))


class TrainingDiverged(RuntimeError):
    pass


class TuningFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    algorithm: Algorithm
    gamma: float
    rounds: int
    precision: Precision = Precision.FP64
    k: int | None = None
    compressor_seed: int = 0
    local_steps: int = 1
    local_gamma: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "algorithm", Algorithm(self.algorithm))
        object.__setattr__(self, "precision", Precision(self.precision))
        if not self.gamma > 0:
            raise ValueError(f"step size must be positive, got {self.gamma}")
        if self.rounds < 1:
            raise ValueError(f"rounds must be at least 1, got {self.rounds}")
        if self.algorithm.compressor == "randk" and self.k is None:
            raise ValueError("RandK variants need k")
        if self.local_steps < 1:
            raise ValueError("local_steps must be at least 1")

    @property
    def fedavg_gamma(self) -> float:
        return self.gamma if self.local_gamma is None else self.local_gamma


@dataclass
class RoundMetrics:
    round: int
    fx: float
    grad_norm_sq: float
    up_bytes: tuple[int, ...]
    down_bytes: tuple[int, ...]
    up_nominal_bytes: tuple[int, ...]
    down_nominal_bytes: tuple[int, ...]
    wall_ms: dict[str, float] = field(default_factory=dict)
    diverged: bool = False

    @property
    def up_bytes_total(self) -> int:
        return sum(self.up_bytes)

    @property
    def down_bytes_total(self) -> int:
        return sum(self.down_bytes)

    CSV_COLUMNS = (
        "round", "fx", "grad_norm_sq", "up_bytes_total", "down_bytes_total",
        "up_bytes_per_client", "down_bytes_per_client",
        "up_nominal_bytes_total", "down_nominal_bytes_total", "wall_ms",
    )

    def csv_row(self) -> list:
        # Per-client columns report the largest client's count; PermK bucket
        # sizes differ by at most one coordinate.
        return [
            self.round, repr(self.fx), repr(self.grad_norm_sq),
            self.up_bytes_total, self.down_bytes_total,
            max(self.up_bytes), max(self.down_bytes),
            sum(self.up_nominal_bytes), sum(self.down_nominal_bytes),
            f"{sum(self.wall_ms.values()):.3f}",
        ]


# --------------------------------------------------------------------------
# traffic accounting


@dataclass(frozen=True)
class Traffic:
    """Per-client bytes for one round; ``nominal`` counts omit the 21-byte header."""

    up: tuple[int, ...]
    down: tuple[int, ...]
    up_nominal: tuple[int, ...]
    down_nominal: tuple[int, ...]


def round_traffic(algorithm: Algorithm, d: int, precision: Precision, counts: Sequence[int]) -> Traffic:
    """Closed-form traffic given how many scalars each client sends."""
    bpp = precision.nbytes
    n = len(counts)
    if algorithm.encrypted:
        up = tuple(secenv.wire_size(m * bpp) for m in counts)
        up_nominal = tuple(m * bpp + secenv.OVERHEAD_BYTES for m in counts)
        return Traffic(up, (sum(up),) * n, up_nominal, (sum(up_nominal),) * n)
    up = tuple(m * bpp for m in counts)
    down = (d * bpp,) * n
    return Traffic(up, down, up, down)


def message_counts(algorithm: Algorithm, d: int, n: int, k: int | None = None) -> list[int]:
    """Worst-case scalars per client message (PermK buckets use ``ceil(d/n)``)."""
    comp = algorithm.compressor
    if comp == "permk":
        return [math.ceil(d / n)] * n
    if comp == "randk":
        return [k] * n
    return [d] * n


def message_bytes(algorithm: Algorithm, d: int, n: int, precision: Precision, k: int | None = None,
                  headers: bool = False) -> int:
    """Size of the largest single client-to-master message."""
    t = round_traffic(Algorithm(algorithm), d, Precision(precision), message_counts(Algorithm(algorithm), d, n, k))
    return max(t.up if headers else t.up_nominal)


# --------------------------------------------------------------------------
# clients


@functools.lru_cache(maxsize=16)
def _assignment(d: int, n: int, seed: int, round: int) -> Assignment:
    # Pure function of its arguments; the cache only saves the simulated
    # clients from re-shuffling the same permutation n times.
    return sample_assignment(d, n, seed, round)


class ClientNode:
    """One worker: its data, its iterate replica, and its view of the key."""

    def __init__(self, client_id: int, problem: Problem, cfg: RunConfig,
                 key: SecretKey | None = None, x0: np.ndarray | None = None) -> None:
        self.id = client_id
        self.problem = problem
        self.cfg = cfg
        self.key = key
        self.guard = ReplayGuard()
        prec = cfg.precision
        x = np.zeros(problem.d) if x0 is None else np.asarray(x0)
        self.x = prec.round(x).copy()
        if cfg.algorithm.encrypted and key is None:
            raise ValueError(f"{cfg.algorithm.value} needs a shared key")

    # -- local computation -------------------------------------------------

    def indices(self, client: int, round: int) -> np.ndarray:
        """Coordinates client ``client`` sends in ``round``, re-derived from the seed."""
        comp = self.cfg.algorithm.compressor
        d = self.problem.d
        if comp == "permk":
            return _assignment(d, self.problem.n, self.cfg.compressor_seed, round).buckets[client]
        if comp == "randk":
            return randk_indices(d, self.cfg.k, Prg.for_round(self.cfg.compressor_seed, round, client))
        return np.arange(d, dtype=np.int64)

    def local_chunk(self, round: int) -> SparseChunk:
        cfg, p = self.cfg, self.problem
        prec = cfg.precision
        if cfg.algorithm is Algorithm.FEDAVG:
            y = self.x
            for _ in range(cfg.local_steps):
                y = prec.round(y - cfg.fedavg_gamma * gradient(p, self.id, y, prec))
            return compress_identity(y, self.id)
        g = gradient(p, self.id, self.x, prec)
        comp = cfg.algorithm.compressor
        if comp == "permk":
            chunk = compress_permk(g, _assignment(p.d, p.n, cfg.compressor_seed, round), self.id)
        elif comp == "randk":
            idx = self.indices(self.id, round)
            chunk = SparseChunk(self.id, idx, g[idx] * g.dtype.type(p.d / cfg.k))
        else:
            chunk = compress_identity(g, self.id)
        return SparseChunk(chunk.owner, chunk.indices, prec.round(chunk.values), chunk.scale_applied)

    def make_envelope(self, round: int) -> Envelope:
        chunk = self.local_chunk(round)
        payload = encode_payload(chunk.values, self.cfg.precision)
        return secenv.seal(self.key, Header(round, self.id), payload)

    # -- updates -------------------------------------------------------------

    def apply_dense(self, ghat: np.ndarray) -> None:
        prec = self.cfg.precision
        if self.cfg.algorithm is Algorithm.FEDAVG:
            self.x = prec.round(ghat).copy()
        else:
            self.x = prec.round(self.x - self.cfg.gamma * prec.round(ghat))

    def apply_block(self, idx: np.ndarray, values: np.ndarray) -> None:
        """``x_b <- x_b - (gamma/n) g_b`` for one PermK block, written as ``gamma * (g_b / n)``."""
        prec = self.cfg.precision
        g = prec.round(values / values.dtype.type(self.problem.n))
        self.x[idx] = prec.round(self.x[idx] - self.cfg.gamma * g)

    def open_one(self, round: int, env: Envelope) -> SparseChunk:
        """Replay-check, verify, and decrypt one envelope into a chunk."""
        self.guard.accept(env.header, round)
        payload = secenv.open(self.key, env)
        j = env.header.client_id
        if not 0 <= j < self.problem.n:
            raise ProtocolError(f"envelope names unknown client {j}")
        idx = self.indices(j, round)
        vals = decode_payload(payload, self.cfg.precision)
        if len(vals) != len(idx):
            raise ProtocolError(f"client {j} sent {len(vals)} values, expected {len(idx)}")
        return SparseChunk(j, idx, vals)

    def receive_envelopes(self, round: int, envelopes: Iterable[Envelope]) -> None:
        """Consume one round's n envelopes.

        PermK/AES blocks are applied one by one in arrival order; their
        supports are disjoint, so the order does not change the result. The
        other encrypted variants wait for all n and average in client-id order.
        """
        n = self.problem.n
        if self.cfg.algorithm is Algorithm.DCGD_PERMK_AES:
            seen = np.zeros(self.problem.d, dtype=bool)
            count = 0
            for env in envelopes:
                chunk = self.open_one(round, env)
                if seen[chunk.indices].any():
                    raise ProtocolError(f"block from client {chunk.owner} overlaps another block")
                seen[chunk.indices] = True
                self.apply_block(chunk.indices, chunk.values)
                count += 1
            if count != n:
                raise ProtocolError(f"expected {n} envelopes, got {count}")
            return
        envs = sorted(envelopes, key=lambda e: e.header.client_id)
        if len(envs) != n:
            raise ProtocolError(f"expected {n} envelopes, got {len(envs)}")
        chunks = [self.open_one(round, e) for e in envs]
        self.apply_dense(assemble(chunks, self.problem.d, n, overlap=True))


class ProtocolError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# run state and round drivers


@dataclass
class RunState:
    problem: Problem
    cfg: RunConfig
    clients: list[ClientNode]
    round: int = 0
    initial_grad_norm_sq: float = 0.0
    diverged: bool = False

    @property
    def x(self) -> np.ndarray:
        return self.clients[0].x


def init_state(problem: Problem, cfg: RunConfig, key: SecretKey | None = None,
               x0: np.ndarray | None = None) -> RunState:
    if cfg.algorithm.compressor == "permk" and problem.d < problem.n:
        raise ValueError("PermK variants require d >= n")
    if cfg.algorithm.encrypted and key is None:
        key = secenv.keygen()
    clients = [ClientNode(i, problem, cfg, key, x0) for i in range(problem.n)]
    _, gn0 = objective_and_gradnorm(problem, clients[0].x.astype(np.float64))
    return RunState(problem, cfg, clients, 0, gn0)


def _finish_round(state: RunState, traffic: Traffic, wall: dict[str, float]) -> RoundMetrics:
    state.round += 1
    x = state.x.astype(np.float64)
    with np.errstate(all="ignore"):
        if np.all(np.isfinite(x)):
            fx, gn = objective_and_gradnorm(state.problem, x)
        else:
            fx, gn = math.inf, math.inf
    diverged = not (math.isfinite(gn) and gn <= DIVERGENCE_FACTOR * max(state.initial_grad_norm_sq, 1e-300))
    state.diverged = diverged
    return RoundMetrics(state.round, fx, gn, traffic.up, traffic.down, traffic.up_nominal,
                        traffic.down_nominal, wall, diverged)


def _ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1e3


def run_round_baseline(state: RunState, cfg: RunConfig | None = None) -> RoundMetrics:
    """Option B: the master averages plaintext messages and broadcasts the mean."""
    cfg = cfg or state.cfg
    k, p = state.round, state.problem
    t0 = time.perf_counter()
    chunks = [c.local_chunk(k) for c in state.clients]
    wall = {"client": _ms(t0)}
    t0 = time.perf_counter()
    ghat = assemble(chunks, p.d, p.n, overlap=True)
    wall["master"] = _ms(t0)
    t0 = time.perf_counter()
    for c in state.clients:
        c.apply_dense(ghat)
    wall["apply"] = _ms(t0)
    traffic = round_traffic(cfg.algorithm, p.d, cfg.precision, [len(ch.values) for ch in chunks])
    return _finish_round(state, traffic, wall)


run_round_fedavg = run_round_baseline


def concat_forward(envelopes: Sequence[Envelope]) -> list[Envelope]:
    """The master's whole job in the encrypted variants: forward without reading."""
    return list(envelopes)


def _run_round_encrypted(state: RunState, cfg: RunConfig,
                         tamper: Callable[[list[Envelope]], list[Envelope]] | None) -> RoundMetrics:
    k, p = state.round, state.problem
    t0 = time.perf_counter()
    sent = [c.make_envelope(k) for c in state.clients]
    wall = {"client": _ms(t0)}
    t0 = time.perf_counter()
    broadcast = concat_forward(sent)
    if tamper is not None:
        broadcast = tamper(broadcast)
    wall["master"] = _ms(t0)
    t0 = time.perf_counter()
    for c in state.clients:
        c.receive_envelopes(k, broadcast)
    wall["apply"] = _ms(t0)
    up = tuple(e.wire_size for e in sent)
    down = (sum(e.wire_size for e in broadcast),) * p.n
    up_nominal = tuple(len(e.ciphertext) + secenv.OVERHEAD_BYTES for e in sent)
    traffic = Traffic(up, down, up_nominal, (sum(up_nominal),) * p.n)
    return _finish_round(state, traffic, wall)


def run_round_naive_aes(state: RunState, cfg: RunConfig | None = None,
                        tamper: Callable[[list[Envelope]], list[Envelope]] | None = None) -> RoundMetrics:
    """Option A: every client decrypts all n messages and averages locally."""
    return _run_round_encrypted(state, cfg or state.cfg, tamper)


def run_round_permk_aes(state: RunState, cfg: RunConfig | None = None,
                        tamper: Callable[[list[Envelope]], list[Envelope]] | None = None) -> RoundMetrics:
    """PermK/AES: disjoint encrypted blocks, applied block by block on arrival."""
    cfg = cfg or state.cfg
    if cfg.algorithm is not Algorithm.DCGD_PERMK_AES:
        raise ValueError("run_round_permk_aes drives DCGD_PERMK_AES only")
    return _run_round_encrypted(state, cfg, tamper)


def run_round(state: RunState, tamper: Callable[[list[Envelope]], list[Envelope]] | None = None) -> RoundMetrics:
    alg = state.cfg.algorithm
    if alg is Algorithm.DCGD_PERMK_AES:
        return run_round_permk_aes(state, tamper=tamper)
    if alg.encrypted:
        return run_round_naive_aes(state, tamper=tamper)
    return run_round_baseline(state)


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    x: np.ndarray
    diverged: bool
    iterates: list[np.ndarray] | None = None

    @property
    def grad_norms(self) -> np.ndarray:
        return np.array([m.grad_norm_sq for m in self.metrics])


def run(problem: Problem, cfg: RunConfig, key: SecretKey | None = None, x0: np.ndarray | None = None,
        record_iterates: bool = False, stop_below: float | None = None,
        on_round: Callable[[RoundMetrics, RunState], None] | None = None) -> RunResult:
    """Drive ``cfg.rounds`` rounds; stops early on divergence or below ``stop_below``."""
    state = init_state(problem, cfg, key, x0)
    metrics: list[RoundMetrics] = []
    iterates = [] if record_iterates else None
    for _ in range(cfg.rounds):
        m = run_round(state)
        metrics.append(m)
        if iterates is not None:
            iterates.append(state.x.copy())
        if on_round is not None:
            on_round(m, state)
        if m.diverged:
            log.info("run diverged at round %d", m.round)
            break
        if stop_below is not None and m.grad_norm_sq <= stop_below:
            break
    return RunResult(metrics, state.x.copy(), state.diverged, iterates)


# --------------------------------------------------------------------------
# step-size tuning


@dataclass
class TuneEntry:
    gamma: float
    seed: int
    final_grad_norm_sq: float
    diverged: bool


@dataclass
class TuneReport:
    best_gamma: float
    entries: list[TuneEntry]

    def diverged(self, gamma: float) -> bool:
        return any(e.diverged for e in self.entries if e.gamma == gamma)

    def gammas(self) -> list[float]:
        return sorted({e.gamma for e in self.entries}, reverse=True)


def tune_step_size(problem: Problem | Callable[[int], Problem], algorithm: Algorithm,
                   grid: Sequence[float], rounds: int, seeds: Sequence[int],
                   base: RunConfig | None = None) -> TuneReport:
    """Grid search over constant step sizes.

    ``problem`` may be a fixed instance (seeds then vary the compressor) or a
    callable mapping a seed to a fresh instance. A step size counts as
    diverged if any seed diverges; the best one minimises the worst final
    squared gradient norm over seeds.
    """
    if not grid:
        raise ValueError("empty step-size grid")
    entries = []
    for gamma in grid:
        for seed in seeds:
            if callable(problem):
                inst, comp_seed = problem(seed), (base.compressor_seed if base else 0)
            else:
                inst, comp_seed = problem, seed
            kw = {} if base is None else {"precision": base.precision, "k": base.k,
                                          "local_steps": base.local_steps, "local_gamma": base.local_gamma}
            cfg = RunConfig(algorithm, gamma, rounds, compressor_seed=comp_seed, **kw)
            res = run(inst, cfg)
            entries.append(TuneEntry(gamma, seed, res.metrics[-1].grad_norm_sq, res.diverged))
            log.info("gamma=%g seed=%d final=%.3e diverged=%s", gamma, seed,
                     entries[-1].final_grad_norm_sq, res.diverged)
    ok = [g for g in grid if not any(e.diverged for e in entries if e.gamma == g)]
    if not ok:
        raise TuningFailure("every step size in the grid diverged")
    best = min(ok, key=lambda g: max(e.final_grad_norm_sq for e in entries if e.gamma == g))
    return TuneReport(best, entries)
