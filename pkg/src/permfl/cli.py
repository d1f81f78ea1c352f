"""Command-line experiment runner.

Exit codes: 0 success, 2 usage error, 3 config error, 4 divergence,
5 authentication failure, 6 tuning failure, 7 protocol or transport error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from permfl import config as cfgmod
from permfl import hecost, sched, secenv
from permfl.compress import UnsupportedRegime
from permfl.config import ConfigError, ExperimentConfig
from permfl.engine import (
    Algorithm,
    ProtocolError,
    RoundMetrics,
    RunResult,
    TuningFailure,
    message_bytes,
    message_counts,
    run,
    tune_step_size,
)
from permfl.numkit import GenerationError, Precision, Problem, generate_problem
from permfl.transport import FramingError, RoundAborted
from permfl.transport import ProtocolError as TransportProtocolError

log = logging.getLogger("permfl")

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DIVERGED = 4
EXIT_AUTH = 5
EXIT_TUNING = 6
EXIT_PROTOCOL = 7


# --------------------------------------------------------------------------
# output helpers


def write_metrics_csv(path: Path, metrics: Sequence[RoundMetrics]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RoundMetrics.CSV_COLUMNS)
        for m in metrics:
            w.writerow(m.csv_row())


def write_iterates_csv(path: Path, iterates: Sequence[np.ndarray]) -> None:
    """One row per round; values written with ``repr`` so they round-trip exactly."""
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        d = len(iterates[0]) if iterates else 0
        w.writerow(["round"] + [f"x{j}" for j in range(d)])
        for k, x in enumerate(iterates, start=1):
            w.writerow([k] + [repr(float(v)) for v in x])


def summarize(res: RunResult, cfg: ExperimentConfig) -> dict:
    last = res.metrics[-1]
    return {
        "algorithm": cfg.run.algorithm,
        "rounds_completed": len(res.metrics),
        "final_fx": last.fx,
        "final_grad_norm_sq": last.grad_norm_sq,
        "diverged": res.diverged,
        "up_bytes_total": sum(m.up_bytes_total for m in res.metrics),
        "down_bytes_total": sum(m.down_bytes_total for m in res.metrics),
        "up_nominal_bytes_total": sum(sum(m.up_nominal_bytes) for m in res.metrics),
        "down_nominal_bytes_total": sum(sum(m.down_nominal_bytes) for m in res.metrics),
    }


def make_problem(cfg: ExperimentConfig, seed: int | None = None, d: int | None = None) -> Problem:
    p = cfg.problem
    return generate_problem(p.seed if seed is None else seed, p.d if d is None else d, p.n, p.n_i,
                            p.l_smooth, p.interpolation, p.spectrum)


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out_dir or cfg.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_config(args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.problem.seed = args.seed
    if getattr(args, "precision", None) is not None:
        cfg.run.precision = args.precision
    if getattr(args, "out_dir", None):
        cfg.output.out_dir = args.out_dir
    cfg.validate()
    return cfg


def read_key(path: str | None) -> secenv.SecretKey | None:
    if path is None:
        return None
    try:
        return secenv.SecretKey(bytes.fromhex(Path(path).read_text().strip()))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"bad key file {path}: {exc}") from None


# --------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args, cfg)
    if args.listen:
        return _run_hub(args, cfg, out)
    if args.connect:
        return _run_client(args, cfg, out)
    (out / "config.ini").write_text(cfgmod.dumps(cfg))
    problem = make_problem(cfg)
    rc = cfg.run_config()
    res = run(problem, rc, key=read_key(args.key_file), record_iterates=cfg.output.record_iterates,
              stop_below=cfg.run.stop_below)
    write_metrics_csv(out / "metrics.csv", res.metrics)
    if res.iterates is not None:
        write_iterates_csv(out / "iterates.csv", res.iterates)
    summary = summarize(res, cfg)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_DIVERGED if res.diverged else EXIT_OK


def _run_hub(args, cfg: ExperimentConfig, out: Path) -> int:
    from permfl.netrun import forwarding_mode
    from permfl.transport import TcpHub, parse_address

    rc = cfg.run_config()
    host, port = parse_address(args.listen)
    hub = TcpHub(cfg.problem.n, forwarding_mode(rc.algorithm), host, port)
    log.info("hub listening on %s:%d", *hub.address)
    try:
        hub.accept_all(timeout=args.timeout)
        hub.serve(rc.rounds, timeout=args.timeout)
    finally:
        hub.close()
    summary = {"up_bytes": hub.counters.up, "down_bytes": hub.counters.down}
    (out / "hub.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _run_client(args, cfg: ExperimentConfig, out: Path) -> int:
    from permfl.netrun import client_loop
    from permfl.transport import connect_with_retry, parse_address

    if args.client_id is None or args.key_file is None:
        raise ConfigError("--connect needs --client-id and --key-file")
    key = read_key(args.key_file)
    rc = cfg.run_config()
    problem = make_problem(cfg)
    ep = connect_with_retry(parse_address(args.connect), args.client_id)
    try:
        logd = client_loop(ep, problem, rc, key, measure=True, timeout=args.timeout)
    finally:
        ep.close()
    write_iterates_csv(out / "iterates.csv", logd.iterates)
    write_metrics_csv(out / "metrics.csv", logd.metrics)
    diverged = not np.all(np.isfinite(logd.iterates[-1]))
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_sweep_dim(args) -> int:
    cfg = load_config(args)
    if args.dims:
        cfg.sweep.dims = [int(v) for v in args.dims.split(",")]
    if not cfg.sweep.dims:
        raise ConfigError("sweep needs at least one dimension")
    out = _out_dir(args, cfg)
    (out / "config.ini").write_text(cfgmod.dumps(cfg))
    ckks = hecost.aes128_equivalent_params()
    n = cfg.problem.n
    rows = []
    any_diverged = False
    for d in cfg.sweep.dims:
        problem = make_problem(cfg, d=d)
        for alg in cfg.sweep.algorithms:
            for prec in cfg.sweep.precisions:
                rc = cfg.run_config(algorithm=alg, precision=prec)
                res = run(problem, rc)
                sub = out / f"d{d}" / f"{alg}_{prec}"
                sub.mkdir(parents=True, exist_ok=True)
                write_metrics_csv(sub / "metrics.csv", res.metrics)
                any_diverged |= res.diverged
                payload = max(message_counts(Algorithm(alg), d, n, rc.k)) * rc.precision.nbytes
                wire = message_bytes(alg, d, n, prec, rc.k, headers=True)
                t = hecost.ckks_traffic_per_round(d, n, ckks)
                rows.append({
                    "d": d, "algorithm": alg, "precision": prec, "rounds": len(res.metrics),
                    "final_grad_norm_sq": repr(res.metrics[-1].grad_norm_sq),
                    "up_bytes_per_client": res.metrics[-1].up_bytes[0],
                    "down_bytes_per_client": res.metrics[-1].down_bytes[0],
                    "payload_bytes": payload,
                    "aes_overhead_fraction": round((wire - payload) / payload, 6),
                    "ckks_up_bytes": t.up, "ckks_down_bytes": t.down, "ckks_key_bytes": t.key,
                })
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    return EXIT_DIVERGED if any_diverged else EXIT_OK


def cmd_tune(args) -> int:
    cfg = load_config(args)
    if args.gammas:
        cfg.sweep.gammas = [float(v) for v in args.gammas.split(",")]
    out = _out_dir(args, cfg)
    (out / "config.ini").write_text(cfgmod.dumps(cfg))
    rc = cfg.run_config()
    report = tune_step_size(lambda s: make_problem(cfg, seed=s), rc.algorithm, cfg.sweep.gammas,
                            cfg.sweep.tune_rounds, cfg.sweep.seeds, base=rc)
    with (out / "tune.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gamma", "seed", "final_grad_norm_sq", "diverged"])
        for e in report.entries:
            w.writerow([repr(e.gamma), e.seed, repr(e.final_grad_norm_sq), str(e.diverged).lower()])
    summary = {"best_gamma": report.best_gamma,
               "diverged": {repr(g): report.diverged(g) for g in cfg.sweep.gammas}}
    (out / "tune.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_schedule(args) -> int:
    cfg = load_config(args)
    out = _out_dir(args, cfg)
    s = cfg.schedule
    model = s.resource_model()
    summary = {}
    for alg in s.algorithms:
        g = sched.build_task_graph(alg, s.n, s.d, s.n_i, s.rounds, model)
        naive = sched.naive_schedule(g, model)
        refined = sched.refine_schedule(g, model, s.max_iters, s.eps_rel)
        (out / f"{alg}_naive.dot").write_text(sched.export_dot(g, naive))
        (out / f"{alg}_refined.dot").write_text(sched.export_dot(g, refined))
        (out / f"{alg}_makespan.csv").write_text(sched.trace_csv(refined.trace))
        summary[alg] = {"naive_makespan_s": naive.makespan, "refined_makespan_s": refined.makespan,
                        "speedup": naive.makespan / refined.makespan,
                        "iterations": len(refined.trace) - 1, "converged": refined.converged}
    (out / "schedule.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_ckks_model(args) -> int:
    dims = [int(v) for v in args.dims.split(",")]
    params = hecost.aes128_equivalent_params(strict=args.strict)
    rows = hecost.cost_table(dims, args.n, params, Precision(args.precision))
    text = hecost.cost_table_csv(rows)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ckks.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_keygen(args) -> int:
    key = secenv.keygen()
    path = Path(args.out)
    path.write_text(key.material.hex() + "\n")
    path.chmod(0o600)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="permfl", description="Encrypted PermK federated-learning experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--out-dir", help="output directory (overrides [output] out_dir)")
        p.add_argument("--seed", type=int, help="problem seed")
        p.add_argument("--precision", choices=[p.value for p in Precision])

    p = sub.add_parser("run", help="run one configured variant")
    common(p)
    p.add_argument("--listen", metavar="HOST:PORT", help="act as the hub for a multi-process run")
    p.add_argument("--connect", metavar="HOST:PORT", help="act as a client of a hub")
    p.add_argument("--client-id", type=int)
    p.add_argument("--key-file", help="hex-encoded AES-128 key shared by the clients")
    p.add_argument("--timeout", type=float, default=60.0, help="network timeout in seconds")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-dim", help="run every sweep variant at each dimension")
    common(p)
    p.add_argument("--dims", help="comma-separated dimensions (overrides [sweep] dims)")
    p.set_defaults(func=cmd_sweep_dim)

    p = sub.add_parser("tune", help="grid-search the step size")
    common(p)
    p.add_argument("--gammas", help="comma-separated grid (overrides [sweep] gammas)")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("schedule", help="critical-path schedule of the [schedule] scenario")
    common(p)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("ckks-model", help="CKKS size model table")
    p.add_argument("--dims", default="1000,10000,100000")
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--precision", choices=[p.value for p in Precision], default="fp64")
    p.add_argument("--strict", action="store_true", help="use the 438-bit modulus")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_ckks_model)

    p = sub.add_parser("keygen", help="write a fresh shared key")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_keygen)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UnsupportedRegime, GenerationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except secenv.AuthFailure as exc:
        print(f"authentication failure: {exc}", file=sys.stderr)
        return EXIT_AUTH
    except TuningFailure as exc:
        print(f"tuning failure: {exc}", file=sys.stderr)
        return EXIT_TUNING
    except (ProtocolError, TransportProtocolError, secenv.ReplayError, FramingError, RoundAborted,
            ConnectionError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
