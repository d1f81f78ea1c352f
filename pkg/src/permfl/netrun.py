"""Client-side round loop over a hub connection.

This glue lives apart from :mod:`permfl.transport` so that the hub code
never imports anything that can hold or use a key.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from permfl.engine import Algorithm, ClientNode, RoundMetrics, RunConfig
from permfl.numkit import Problem, objective_and_gradnorm
from permfl.secenv import Envelope, SecretKey
from permfl.transport import run_loopback


class Endpoint(Protocol):
    client: int

    def send(self, env: Envelope) -> None: ...

    def recv(self, timeout: float | None = None) -> Envelope: ...


@dataclass
class ClientLog:
    iterates: list[np.ndarray] = field(default_factory=list)
    metrics: list[RoundMetrics] = field(default_factory=list)


def client_loop(ep: Endpoint, problem: Problem, cfg: RunConfig, key: SecretKey,
                measure: bool = False, timeout: float | None = 60.0) -> ClientLog:
    """Run ``cfg.rounds`` rounds as client ``ep.client``; returns its replica history."""
    if not cfg.algorithm.encrypted:
        raise ValueError("networked runs carry envelopes, so the algorithm must be an encrypted variant")
    node = ClientNode(ep.client, problem, cfg, key)
    out = ClientLog()
    for k in range(cfg.rounds):
        env = node.make_envelope(k)
        ep.send(env)
        received: list[Envelope] = []

        def stream():
            for _ in range(problem.n):
                e = ep.recv(timeout)
                received.append(e)
                yield e

        node.receive_envelopes(k, stream())
        out.iterates.append(node.x.copy())
        if measure:
            fx, gn = objective_and_gradnorm(problem, node.x.astype(np.float64))
            down = sum(e.wire_size for e in received)
            down_nominal = sum(len(e.ciphertext) + 32 for e in received)
            out.metrics.append(RoundMetrics(k + 1, fx, gn, (env.wire_size,), (down,),
                                            (len(env.ciphertext) + 32,), (down_nominal,)))
    return out


def forwarding_mode(algorithm: Algorithm) -> str:
    """Eager forwarding lets PermK clients start on blocks early; others wait for all n."""
    return "eager" if Algorithm(algorithm) is Algorithm.DCGD_PERMK_AES else "barrier"


def run_over_loopback(problem: Problem, cfg: RunConfig, key: SecretKey,
                      mode: str | None = None) -> list[ClientLog]:
    """Every client in its own thread, talking through an in-process hub."""
    logs: list[ClientLog | None] = [None] * problem.n

    def body(ep) -> None:
        logs[ep.client] = client_loop(ep, problem, cfg, key)

    run_loopback(problem.n, cfg.rounds, body, mode or forwarding_mode(cfg.algorithm))
    return logs  # type: ignore[return-value]
