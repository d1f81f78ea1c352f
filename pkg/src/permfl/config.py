"""INI experiment configuration.

Sections and keys (all optional; defaults give the desk-scale preset)::

    [problem]   seed, d, n, n_i, l_smooth, interpolation, spectrum
    [run]       algorithm, gamma, rounds, precision, k, compressor_seed,
                local_steps, local_gamma, stop_below
    [sweep]     gammas, dims, precisions, seeds, algorithms, tune_rounds
    [output]    out_dir, record_iterates
    [schedule]  algorithms, n, d, n_i, rounds, cores, frequency_hz,
                flops_per_cycle, add_cost, mult_cost, mem_cost,
                aes_cycles_per_byte, bandwidth, bandwidth_unit (MBps|Mbps),
                rtt_s, bpp, max_iters, eps_rel

Lists are comma-separated. The file written next to every run's outputs is
the fully resolved config, so re-running it reproduces the run.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from permfl.engine import Algorithm, RunConfig
from permfl.numkit import Precision
from permfl.sched import FIG8_N_I, ResourceModel


class ConfigError(ValueError):
    pass


@dataclass
class ProblemSection:
    seed: int = 0
    d: int = 100
    n: int = 10
    n_i: int = 5
    l_smooth: float = 10.0
    interpolation: bool = True
    spectrum: str = "exact"


@dataclass
class RunSection:
    algorithm: str = "gd"
    gamma: float = 0.1
    rounds: int = 100
    precision: str = "fp64"
    k: int | None = None
    compressor_seed: int = 0
    local_steps: int = 1
    local_gamma: float | None = None
    stop_below: float | None = None


@dataclass
class SweepSection:
    gammas: list[float] = field(default_factory=lambda: [0.05, 0.03, 0.02, 0.01, 0.007])
    dims: list[int] = field(default_factory=lambda: [1000, 10000, 100000])
    precisions: list[str] = field(default_factory=lambda: ["fp64"])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    algorithms: list[str] = field(default_factory=lambda: ["gd_aes", "dcgd_permk_aes"])
    tune_rounds: int = 2000


@dataclass
class OutputSection:
    out_dir: str = "out"
    record_iterates: bool = False


@dataclass
class ScheduleSection:
    algorithms: list[str] = field(default_factory=lambda: ["gd", "dcgd_permk_aes"])
    n: int = 4
    d: int = 10_000_000
    n_i: list[int] = field(default_factory=lambda: list(FIG8_N_I))
    rounds: int = 4
    cores: int = 10
    frequency_hz: float = 3.2e9
    flops_per_cycle: int = 8
    add_cost: float = 1.0
    mult_cost: float = 1.0
    mem_cost: float = 0.625
    aes_cycles_per_byte: float = 1.5
    bandwidth: float = 41.54
    bandwidth_unit: str = "MBps"
    rtt_s: float = 0.028
    bpp: int = 32
    max_iters: int = 50
    eps_rel: float = 1e-3

    def resource_model(self) -> ResourceModel:
        unit = {"mbps": 1e6, "mbyteps": 8e6}
        key = "mbyteps" if self.bandwidth_unit == "MBps" else self.bandwidth_unit.lower()
        if key not in unit:
            raise ConfigError(f"bandwidth_unit must be MBps or Mbps, got {self.bandwidth_unit!r}")
        return ResourceModel(self.cores, self.frequency_hz, self.flops_per_cycle, self.add_cost,
                             self.mult_cost, self.mem_cost, self.aes_cycles_per_byte,
                             self.bandwidth * unit[key], self.rtt_s, self.bpp)


@dataclass
class ExperimentConfig:
    problem: ProblemSection = field(default_factory=ProblemSection)
    run: RunSection = field(default_factory=RunSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)

    def run_config(self, **overrides) -> RunConfig:
        r = dataclasses.replace(self.run, **overrides)
        try:
            return RunConfig(Algorithm(r.algorithm), r.gamma, r.rounds, Precision(r.precision), r.k,
                             r.compressor_seed, r.local_steps, r.local_gamma)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def validate(self) -> None:
        p = self.problem
        if min(p.d, p.n, p.n_i) < 1 or not p.l_smooth > 0:
            raise ConfigError("problem needs d, n, n_i >= 1 and l_smooth > 0")
        if p.spectrum not in ("exact", "scaled"):
            raise ConfigError(f"unknown spectrum {p.spectrum!r}")
        rc = self.run_config()
        if rc.algorithm.compressor == "randk" and not 1 <= rc.k <= p.d:
            raise ConfigError(f"k must lie in [1, d], got {rc.k}")
        if rc.algorithm.compressor == "permk" and p.d < p.n:
            raise ConfigError("PermK variants need d >= n")
        try:
            for a in self.sweep.algorithms:
                Algorithm(a)
            for pr in self.sweep.precisions:
                Precision(pr)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        s = self.schedule
        if len(s.n_i) != s.n:
            raise ConfigError("schedule.n_i needs one entry per client")
        try:
            s.resource_model()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


_SECTIONS = ("problem", "run", "sweep", "output", "schedule")


def _int(raw: str) -> int:
    # accepts 1e7-style literals as long as they are whole numbers
    try:
        return int(raw)
    except ValueError:
        f = float(raw)
        if not f.is_integer():
            raise ValueError(f"not an integer: {raw!r}") from None
        return int(f)


def _parse(raw: str, ftype, name: str):
    t = str(ftype)
    optional = "None" in t
    if optional and raw.strip().lower() in ("", "none"):
        return None
    try:
        if t.startswith("list[int]"):
            return [_int(v) for v in raw.split(",") if v.strip()]
        if t.startswith("list[float]"):
            return [float(v) for v in raw.split(",") if v.strip()]
        if t.startswith("list[str]"):
            return [v.strip() for v in raw.split(",") if v.strip()]
        if t.startswith("bool"):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "1", "yes")
        if t.startswith("int"):
            return _int(raw)
        if t.startswith("float"):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def loads(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig()
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        target = getattr(cfg, sec)
        known = {f.name: f for f in dataclasses.fields(target)}
        for key, raw in cp.items(sec):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            setattr(target, key, _parse(raw, known[key].type, f"{sec}.{key}"))
    return cfg


def load(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return loads(text)


def dumps(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for sec in _SECTIONS:
        cp[sec] = {f.name: _format(getattr(getattr(cfg, sec), f.name))
                   for f in dataclasses.fields(getattr(cfg, sec))}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
