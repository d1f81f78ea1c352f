"""Task-graph model of compute and communication, scheduled by critical path.

A round of GD or of encrypted PermK is unrolled into a DAG of tasks. Each
task runs on one resource: a client's CPU, the master's CPU, the shared
uplink, or the shared downlink. Start times are longest-path distances from
the source vertex.

Durations depend on contention, and contention depends on the schedule.
The *naive* schedule breaks that cycle pessimistically: a task is assumed
to share its resource with every task on that resource it is not ordered
with in the DAG. :func:`refine_schedule` then iterates, replacing the
assumed sharing with the time-weighted overlap the current schedule
actually produces.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SOURCE = 0
SINK = 1


class InvalidGraph(ValueError):
    """The task graph contains a cycle."""


class TaskKind(str, enum.Enum):
    COMPUTE = "Compute"
    ENCRYPT = "Encrypt"
    SEND_UP = "SendUp"
    BROADCAST = "Broadcast"
    DECRYPT_VERIFY = "DecryptVerify"
    APPLY_UPDATE = "ApplyUpdate"
    SOURCE = "Source"
    SINK = "Sink"

    @property
    def is_transfer(self) -> bool:
        return self in (TaskKind.SEND_UP, TaskKind.BROADCAST)


MASTER = -1


@dataclass(frozen=True)
class Task:
    kind: TaskKind
    client: int = MASTER  # for Broadcast: the recipient
    round: int = -1
    block: int = -1
    work: float = 0.0  # cycles for CPU tasks, bytes for transfers
    parallel_cap: int = 1
    vector_ops: bool = True  # arithmetic cycles issue on all vector lanes; AES cycles do not

    @property
    def resource(self) -> str | None:
        if self.kind in (TaskKind.SOURCE, TaskKind.SINK):
            return None
        if self.kind is TaskKind.SEND_UP:
            return "uplink"
        if self.kind is TaskKind.BROADCAST:
            return "downlink"
        return "cpu:master" if self.client == MASTER else f"cpu:{self.client}"

    @property
    def is_barrier(self) -> bool:
        return self.kind is TaskKind.COMPUTE and self.client == MASTER


@dataclass
class TaskGraph:
    """Vertex 0 is the source, vertex 1 the sink; edge weights are producer durations."""

    tasks: list[Task] = field(default_factory=lambda: [Task(TaskKind.SOURCE), Task(TaskKind.SINK)])
    succ: list[list[int]] = field(default_factory=lambda: [[SINK], []])

    def add(self, task: Task, deps: Sequence[int] = ()) -> int:
        v = len(self.tasks)
        self.tasks.append(task)
        self.succ.append([SINK])
        self.succ[SOURCE].append(v)
        for u in deps:
            self.succ[u].append(v)
        return v

    def add_edge(self, u: int, v: int) -> None:
        self.succ[u].append(v)

    @property
    def n_vertices(self) -> int:
        return len(self.tasks)

    @property
    def n_edges(self) -> int:
        return sum(len(s) for s in self.succ)

    def edges(self) -> list[tuple[int, int]]:
        return [(u, v) for u, vs in enumerate(self.succ) for v in vs]

    def data_edges(self) -> list[tuple[int, int]]:
        return [(u, v) for u, v in self.edges() if u != SOURCE and v != SINK]

    def preds(self) -> list[list[int]]:
        p: list[list[int]] = [[] for _ in self.tasks]
        for u, v in self.edges():
            p[v].append(u)
        return p


@dataclass(frozen=True)
class ResourceModel:
    cores: int = 10
    frequency_hz: float = 3.2e9
    flops_per_cycle: int = 8  # per core: two FUs, four lanes each
    add_cost: float = 1.0
    mult_cost: float = 1.0
    mem_cost: float = 0.625  # cycles per scalar load/store, amortised over cache lines
    aes_cycles_per_byte: float = 1.5
    bandwidth_bps: float = 41.54e6 * 8
    rtt_s: float = 0.028
    bpp: int = 32

    def __post_init__(self) -> None:
        for name in ("cores", "frequency_hz", "flops_per_cycle", "add_cost", "mult_cost",
                     "mem_cost", "aes_cycles_per_byte", "bandwidth_bps", "rtt_s", "bpp"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def peak_flops(self) -> float:
        return self.cores * self.frequency_hz * self.flops_per_cycle

    @property
    def core_rate(self) -> float:
        """Arithmetic cycles retired per second on one core."""
        return self.frequency_hz * self.flops_per_cycle


def comm_delay(d_scalars: float, bpp: float, bandwidth_bps: float, rtt_s: float) -> float:
    """One-way latency plus serialisation time for ``d_scalars`` values."""
    return rtt_s / 2 + d_scalars * bpp / bandwidth_bps


def inner_product_cycles(d: int, m: ResourceModel) -> float:
    if d < 1:
        raise ValueError(f"inner product needs d >= 1, got {d}")
    return (d - 1) * m.add_cost + d * m.mult_cost + 2 * d * m.mem_cost


def inner_product_cost(d: int, m: ResourceModel) -> float:
    """Seconds for a length-``d`` inner product on one core."""
    return inner_product_cycles(d, m) / m.core_rate


def gradient_cycles(n_i: int, d: int, m: ResourceModel) -> float:
    """``A^T (A x - b)``: n_i row products, n_i subtractions, d column products."""
    return n_i * inner_product_cycles(d, m) + n_i * m.add_cost + d * inner_product_cycles(n_i, m)


def axpy_cycles(d: int, m: ResourceModel) -> float:
    return d * (m.add_cost + m.mult_cost) + 3 * d * m.mem_cost


def _bytes(scalars: int, m: ResourceModel) -> float:
    return scalars * m.bpp / 8


def _blocks(d: int, n: int) -> list[int]:
    base, extra = divmod(d, n)
    return [base + (1 if b < extra else 0) for b in range(n)]


def build_task_graph(algorithm: str, n: int, d: int, n_i: Sequence[int], rounds: int,
                     model: ResourceModel) -> TaskGraph:
    """Unroll ``rounds`` rounds of ``"gd"`` or ``"dcgd_permk_aes"`` over ``n`` clients."""
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    if len(n_i) != n:
        raise ValueError("one sample count per client required")
    alg = str(getattr(algorithm, "value", algorithm)).lower()
    if alg == "gd":
        return _gd_graph(n, d, list(n_i), rounds, model)
    if alg == "dcgd_permk_aes":
        if d < n:
            raise ValueError("PermK needs d >= n")
        return _permk_graph(n, d, list(n_i), rounds, model)
    raise ValueError(f"no task-graph construction for {algorithm!r}")


def _gd_graph(n: int, d: int, n_i: list[int], rounds: int, m: ResourceModel) -> TaskGraph:
    g = TaskGraph()
    applied: list[list[int]] = [[] for _ in range(n)]
    msg = _bytes(d, m)
    for k in range(rounds):
        sends = []
        for i in range(n):
            c = g.add(Task(TaskKind.COMPUTE, i, k, work=gradient_cycles(n_i[i], d, m), parallel_cap=m.cores),
                      applied[i])
            sends.append(g.add(Task(TaskKind.SEND_UP, i, k, work=msg), [c]))
        agg_cycles = (n - 1) * d * m.add_cost + d * m.mult_cost + (n + 1) * d * m.mem_cost
        barrier = g.add(Task(TaskKind.COMPUTE, MASTER, k, work=agg_cycles, parallel_cap=m.cores), sends)
        for j in range(n):
            b = g.add(Task(TaskKind.BROADCAST, j, k, work=msg), [barrier])
            applied[j] = [g.add(Task(TaskKind.APPLY_UPDATE, j, k, work=axpy_cycles(d, m),
                                     parallel_cap=m.cores), [b])]
    return g


def _permk_graph(n: int, d: int, n_i: list[int], rounds: int, m: ResourceModel) -> TaskGraph:
    g = TaskGraph()
    sizes = _blocks(d, n)
    env = [_bytes(s, m) + 32 for s in sizes]
    # applied[j][b]: vertex that last wrote block b of client j's replica
    applied: list[list[int | None]] = [[None] * n for _ in range(n)]
    for k in range(rounds):
        residual = [[0] * n for _ in range(n)]
        sends = []
        for i in range(n):
            for b in range(n):
                dep = [] if applied[i][b] is None else [applied[i][b]]
                work = n_i[i] * inner_product_cycles(sizes[b], m) + n_i[i] * m.add_cost
                residual[i][b] = g.add(Task(TaskKind.COMPUTE, i, k, b, work, m.cores), dep)
            own = sizes[i]
            grad = g.add(Task(TaskKind.COMPUTE, i, k, i, n_i[i] * m.add_cost + own * inner_product_cycles(n_i[i], m),
                              m.cores), residual[i])
            enc = g.add(Task(TaskKind.ENCRYPT, i, k, i, _bytes(own, m) * m.aes_cycles_per_byte, 1, False), [grad])
            sends.append(g.add(Task(TaskKind.SEND_UP, i, k, i, env[i]), [enc]))
        for b in range(n):
            # the master forwards block b the moment it arrives
            for j in range(n):
                bc = g.add(Task(TaskKind.BROADCAST, j, k, b, env[b]), [sends[b]])
                dec = g.add(Task(TaskKind.DECRYPT_VERIFY, j, k, b, _bytes(sizes[b], m) * m.aes_cycles_per_byte,
                                 1, False), [bc])
                # residual[j][b] must read x_b before this round's update overwrites it
                applied[j][b] = g.add(Task(TaskKind.APPLY_UPDATE, j, k, b, axpy_cycles(sizes[b], m), m.cores),
                                      [dec, residual[j][b]])
    return g


# --------------------------------------------------------------------------
# critical path


@dataclass
class Schedule:
    start: np.ndarray
    duration: np.ndarray
    converged: bool = True
    trace: list[float] = field(default_factory=list)

    @property
    def makespan(self) -> float:
        return float(np.max(self.start + self.duration)) if len(self.start) else 0.0

    def finish(self) -> np.ndarray:
        return self.start + self.duration


def topological_order(g: TaskGraph) -> list[int]:
    indeg = [0] * g.n_vertices
    for vs in g.succ:
        for v in vs:
            indeg[v] += 1
    q = deque(v for v in range(g.n_vertices) if indeg[v] == 0)
    order = []
    while q:
        u = q.popleft()
        order.append(u)
        for v in g.succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                q.append(v)
    if len(order) != g.n_vertices:
        raise InvalidGraph("task graph has a cycle")
    return order


def schedule_cpm(g: TaskGraph, durations: Sequence[float] | None = None) -> Schedule:
    """Earliest start times as longest-path distances from the source."""
    dur = np.array([0.0] * g.n_vertices if durations is None else durations, dtype=np.float64)
    start = np.zeros(g.n_vertices)
    for u in topological_order(g):
        end = start[u] + dur[u]
        for v in g.succ[u]:
            if end > start[v]:
                start[v] = end
    return Schedule(start, dur)


def check_precedence(g: TaskGraph, s: Schedule, tol: float = 1e-9) -> bool:
    fin = s.finish()
    return all(s.start[v] + tol * max(1.0, fin[u]) >= fin[u] for u, v in g.edges())


def critical_path(g: TaskGraph, s: Schedule) -> list[int]:
    """One longest source-to-sink path through the schedule."""
    preds = g.preds()
    fin = s.finish()
    path, v = [SINK], SINK
    while v != SOURCE:
        tight = [u for u in preds[v] if math.isclose(fin[u], s.start[v], rel_tol=1e-12, abs_tol=1e-12)]
        # prefer a real task over the zero-length source edge
        v = max(tight, key=lambda u: (u != SOURCE, fin[u]))
        path.append(v)
    return path[::-1]


# --------------------------------------------------------------------------
# contention model


def _solo_rate_duration(t: Task, m: ResourceModel, share: float) -> float:
    """Duration of ``t`` when its resource is split ``share`` ways."""
    if t.kind.is_transfer:
        return m.rtt_s / 2 + t.work * 8 * share / m.bandwidth_bps
    if t.resource is None:
        return 0.0
    cores = min(float(t.parallel_cap), m.cores / share)
    rate = m.core_rate if t.vector_ops else m.frequency_hz
    return t.work / (rate * cores)


def _by_resource(g: TaskGraph) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = defaultdict(list)
    for v, t in enumerate(g.tasks):
        if t.resource is not None:
            groups[t.resource].append(v)
    return groups


def _reachability(g: TaskGraph) -> list[int]:
    """Bitset of descendants for every vertex."""
    reach = [0] * g.n_vertices
    for u in reversed(topological_order(g)):
        r = 0
        for v in g.succ[u]:
            r |= reach[v] | (1 << v)
        reach[u] = r
    return reach


def naive_durations(g: TaskGraph, m: ResourceModel) -> np.ndarray:
    """Durations assuming every DAG-unordered task on a resource runs concurrently."""
    reach = _reachability(g)
    dur = np.zeros(g.n_vertices)
    for vs in _by_resource(g).values():
        for v in vs:
            share = 1 + sum(1 for u in vs if u != v and not (reach[u] >> v) & 1 and not (reach[v] >> u) & 1)
            dur[v] = _solo_rate_duration(g.tasks[v], m, share)
    return dur


def observed_durations(g: TaskGraph, s: Schedule, m: ResourceModel) -> np.ndarray:
    """Durations under the time-weighted overlap that schedule ``s`` exhibits."""
    dur = np.zeros(g.n_vertices)
    start, fin = s.start, s.finish()
    for vs in _by_resource(g).values():
        idx = np.array(vs)
        st, fn = start[idx], fin[idx]
        overlap = np.clip(np.minimum(fn[:, None], fn[None, :]) - np.maximum(st[:, None], st[None, :]), 0, None)
        np.fill_diagonal(overlap, 0.0)
        length = fn - st
        with np.errstate(invalid="ignore", divide="ignore"):
            share = np.where(length > 0, 1 + overlap.sum(axis=1) / length, 1.0)
        for v, sh in zip(vs, share):
            dur[v] = _solo_rate_duration(g.tasks[v], m, float(sh))
    return dur


def refine_schedule(g: TaskGraph, model: ResourceModel, max_iters: int = 50, eps_rel: float = 1e-3,
                    damping: float = 0.5) -> Schedule:
    """Fixpoint of CPM and the contention model, starting from the naive schedule.

    ``trace[0]`` is the naive makespan; each later entry is the CPM makespan of
    that iteration's durations. Each step moves durations ``damping`` of the
    way toward what the previous schedule's overlap implies.
    """
    if max_iters < 1 or not eps_rel > 0:
        raise ValueError("need max_iters >= 1 and eps_rel > 0")
    dur = naive_durations(g, model)
    s = schedule_cpm(g, dur)
    trace = [s.makespan]
    converged = False
    for _ in range(max_iters):
        target = observed_durations(g, s, model)
        dur = (1 - damping) * dur + damping * target
        s = schedule_cpm(g, dur)
        trace.append(s.makespan)
        if abs(trace[-1] - trace[-2]) <= eps_rel * max(trace[-2], 1e-300):
            converged = True
            break
    s.converged = converged
    s.trace = trace
    return s


def naive_schedule(g: TaskGraph, model: ResourceModel) -> Schedule:
    s = schedule_cpm(g, naive_durations(g, model))
    s.trace = [s.makespan]
    return s


# --------------------------------------------------------------------------
# scenarios and export


FIG8_N_I = (55_000, 11_000, 11_000, 11_000)


@dataclass
class ScenarioResult:
    algorithm: str
    naive_makespan: float
    refined_makespan: float
    iterations: int
    converged: bool
    trace: list[float]

    @property
    def speedup(self) -> float:
        return self.naive_makespan / self.refined_makespan


def run_scenario(algorithm: str, n: int = 4, d: int = 10_000_000, n_i: Sequence[int] = FIG8_N_I,
                 rounds: int = 4, model: ResourceModel | None = None, max_iters: int = 50,
                 eps_rel: float = 1e-3) -> tuple[TaskGraph, Schedule, ScenarioResult]:
    model = model or ResourceModel()
    g = build_task_graph(algorithm, n, d, n_i, rounds, model)
    s = refine_schedule(g, model, max_iters, eps_rel)
    res = ScenarioResult(algorithm, s.trace[0], s.makespan, len(s.trace) - 1, s.converged, s.trace)
    return g, s, res


def trace_csv(trace: Sequence[float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "makespan_s"])
    for i, v in enumerate(trace):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()


_COLORS = {
    TaskKind.SEND_UP: "yellow",
    TaskKind.BROADCAST: "green",
    TaskKind.SOURCE: "gray",
    TaskKind.SINK: "gray",
}


def export_dot(g: TaskGraph, s: Schedule | None = None) -> str:
    """Graphviz digraph: compute blue, client-to-master yellow, master-to-client green."""
    lines = ["digraph schedule {", "  rankdir=LR;", "  node [shape=box, style=filled];"]
    for v, t in enumerate(g.tasks):
        label = f"{t.kind.value}"
        if t.resource is not None:
            label += f"\\nclient={t.client} round={t.round}"
            if t.block >= 0:
                label += f" block={t.block}"
        if s is not None:
            label += f"\\nstart={s.start[v]:.6g} dur={s.duration[v]:.6g}"
        color = _COLORS.get(t.kind, "lightblue")
        lines.append(f'  v{v} [label="{label}", fillcolor={color}];')
    for u, v in g.edges():
        w = 0.0 if (s is None or u == SOURCE or v == SINK) else s.duration[u]
        lines.append(f'  v{u} -> v{v} [label="{w:.6g}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
