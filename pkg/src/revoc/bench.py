"""Micro-benchmarks for the five headline operations.

Wall-clock means cover local computation only.  The latency column comes from
the simulated block clock, so it depends on ``confirmation_depth`` and
``block_interval`` and nothing else.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

from .contract import TracingContract, TraceRequest, bytecode
from .fbs import (issuer_keygen, issuer_respond, issuer_session_start, tracer_keygen, user_blind,
                  user_finalize, user_keygen, user_start, verify_sig)
from .group import setup
from .parties import LocalBus, NodeEndpoint, Platform, Tracer

REFERENCE_TRACE_BYTES = 132   # published request size, shown for comparison only


@dataclass
class BenchRow:
    operation: str
    runs: int
    mean_seconds: float
    payload_bytes: int
    meter_units: int
    latency_seconds: float

    def to_dict(self):
        return asdict(self)


def _mean(samples):
    return sum(samples) / len(samples)


def _timed(fn, n):
    samples = []
    for _ in range(n):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return _mean(samples)


def run_bench(n: int = 300, backend: str = "ec", *, confirmation_depth: int = 3,
              block_interval: float = 6.0) -> list[BenchRow]:
    params = setup(backend=backend)
    platform = Platform(params, confirmation_depth=confirmation_depth, block_interval=block_interval)
    cid = platform.deploy_tracing_contract()
    bus = LocalBus()
    bus.register(NodeEndpoint("node", platform))
    issuer = issuer_keygen(params)
    tracer = Tracer(tracer_keygen(params), platform.ledger, cid)
    code = bytecode(params.backend_id)

    def fresh_register():
        TracingContract.from_bytecode(code).register_params(issuer.public)

    t_param = _timed(fresh_register, n)
    reg = tracer.trace(bus, TraceRequest.register(params, issuer.public))
    y_t = reg.element.precompute()

    user = user_keygen(params, "bench")
    creds, sessions, issue_bytes = [], [], 0

    def one_issue():
        nonlocal issue_bytes
        msg1, us = user_start(user, issuer.public, y_t)
        msg2, isess = issuer_session_start(issuer, y_t, msg1, user.xi)
        msg3, us = user_blind(us, msg2, b"bench")
        msg4 = issuer_respond(isess, msg3)
        creds.append(user_finalize(us, msg4, b"bench"))
        sessions.append(isess.session_id)
        issue_bytes = sum(len(m.to_bytes()) for m in (msg1, msg2, msg3, msg4))

    t_issue = _timed(one_issue, n)
    it = iter(creds)
    t_verify = _timed(lambda: verify_sig(issuer.public, next(it)), n)
    cred_bytes = len(creds[0].to_json().encode())

    def trace_row(name, make_request, operands):
        outcomes = []
        it = iter(operands)

        def one():
            outcomes.append(tracer.trace(bus, make_request(next(it))))

        mean = _timed(one, n)
        last = outcomes[-1]
        return BenchRow(name, n, mean, last.request_bytes, last.result.meter_delta, last.latency)

    rows = [
        BenchRow("parameter generation", n, t_param, reg.request_bytes, reg.result.meter_delta, reg.latency),
        BenchRow("credential issuing", n, t_issue, issue_bytes, 0, 0.0),
        BenchRow("credential verifying", n, t_verify, cred_bytes, 0, 0.0),
        trace_row("credential tracing", TraceRequest.credential, sessions),
        trace_row("identity tracing", TraceRequest.identity, [c.zeta1 for c in creds]),
    ]
    return rows


def format_table(rows: list[BenchRow]) -> str:
    head = f"{'operation':<22} {'N':>5} {'mean s':>10} {'bytes':>6} {'meter':>6} {'latency s':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.operation:<22} {r.runs:>5} {r.mean_seconds:>10.5f} {r.payload_bytes:>6} "
                     f"{r.meter_units:>6} {r.latency_seconds:>10.1f}")
    lines.append(f"(reference trace request size: {REFERENCE_TRACE_BYTES} bytes)")
    return "\n".join(lines)


def to_json(rows: list[BenchRow]) -> str:
    return json.dumps([r.to_dict() for r in rows], indent=2)
