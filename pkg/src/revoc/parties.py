"""Protocol drivers for the five actors (issuer, user, verifier, tracer,
inspector) plus the TEE node endpoint, over an in-process bus or TCP.

Wire format: ``u32 big-endian length || JSON {"type", "session", "payload"}``
with binary fields hex-encoded.  Replies use the request's type, or
``ERROR`` with ``{"code", "message"}``.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from . import frames
from .attestation import AttestationAuthority, AttestationReport
from .contract import BATCH, CREDENTIAL, IDENTITY, TraceRequest, TraceResult, bytecode
from .enclave import (ChannelAccept, ChannelHello, EnclaveNode, asm_encrypt, complete_channel,
                      read_release)
from .errors import (ChannelFailure, MalformedEncoding, OutOfOrderMessage, RevocError,
                     TransportTimeout, UnconfirmedTransaction, UnknownContract, UnknownSession,
                     from_code)
from .fbs import (Credential, IssuerKey, IssuerPublicKey, Msg1, Msg2, Msg3, Msg4, SessionRegistry,
                  TracerSessionKey, UserIdentity, issuer_respond, issuer_session_start, user_blind,
                  user_finalize, user_start, verify_sig)
from .group import GroupElement, GroupParams
from .ledger import DEPLOY, TRACE_KINDS, Ledger, Receipt, verify_bytes

log = logging.getLogger(__name__)

MESSAGE_TYPES = ("ISSUE1", "ISSUE2", "ISSUE3", "ISSUE4", "SHOW", "TRACE_REQ", "TRACE_ACK",
                 "TRACE_RESULT", "INSPECT_REQ", "INSPECT_REPORT", "ERROR")


# --- framing & transports ---------------------------------------------------

def encode_frame(msg: dict) -> bytes:
    body = json.dumps(msg, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack(">I", len(body)) + body


def decode_frame(data: bytes) -> dict:
    (n,) = struct.unpack(">I", data[:4])
    return json.loads(data[4:4 + n])


def message(type_: str, payload: dict, session: str = "") -> dict:
    return {"type": type_, "session": session, "payload": payload}


def _recv_exact(sock, n):
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf += chunk
    return buf


def _recv_frame(sock) -> bytes:
    header = _recv_exact(sock, 4)
    (n,) = struct.unpack(">I", header)
    return header + _recv_exact(sock, n)


class Actor:
    """Base endpoint: one lock so each actor handles its messages in arrival order."""

    role = "actor"

    def __init__(self, name: str):
        self.name = name
        self._lock = threading.Lock()

    def dispatch(self, msg: dict) -> dict:
        with self._lock:
            try:
                handler = getattr(self, "on_" + msg["type"].lower())
            except AttributeError:
                return message("ERROR", {"code": MalformedEncoding.code, "message": f"{self.role} cannot handle {msg['type']}"})
            try:
                return handler(msg)
            except RevocError as exc:
                return message("ERROR", {"code": exc.code, "message": str(exc)}, msg.get("session", ""))
            except (KeyError, ValueError, TypeError) as exc:
                return message("ERROR", {"code": MalformedEncoding.code, "message": f"bad payload: {exc}"},
                               msg.get("session", ""))


class Bus:
    """Common request/reply logic; ``wire`` keeps every frame that crossed it."""

    def __init__(self):
        self.wire: list[tuple[str, str, bytes]] = []
        self._wire_lock = threading.Lock()

    def _log(self, dest, kind, data):
        with self._wire_lock:
            self.wire.append((dest, kind, data))

    def request(self, dest: str, msg: dict) -> dict:
        frame = encode_frame(msg)
        self._log(dest, msg["type"], frame)
        reply_frame = self._roundtrip(dest, frame)
        reply = decode_frame(reply_frame)
        self._log(dest, reply["type"], reply_frame)
        if reply["type"] == "ERROR":
            raise from_code(reply["payload"]["code"], reply["payload"]["message"])
        return reply

    def wire_bytes(self) -> bytes:
        return b"".join(data for _, _, data in self.wire)

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LocalBus(Bus):
    def __init__(self):
        super().__init__()
        self.actors: dict[str, Actor] = {}

    def register(self, actor: Actor):
        self.actors[actor.name] = actor
        return actor

    def _roundtrip(self, dest, frame):
        actor = self.actors.get(dest)
        if actor is None:
            raise TransportTimeout(f"no actor named {dest}")
        return encode_frame(actor.dispatch(decode_frame(frame)))


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        try:
            frame = _recv_frame(self.request)
        except (ConnectionError, OSError):
            return
        reply = self.server.actor.dispatch(decode_frame(frame))
        self.request.sendall(encode_frame(reply))


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class TcpBus(Bus):
    """Each registered actor listens on its own localhost port."""

    def __init__(self, host: str = "127.0.0.1", timeout: float = 10.0):
        super().__init__()
        self.host = host
        self.timeout = timeout
        self.addresses: dict[str, tuple[str, int]] = {}
        self._servers: list[_Server] = []

    def register(self, actor: Actor):
        server = _Server((self.host, 0), _Handler)
        server.actor = actor
        threading.Thread(target=server.serve_forever, name=f"revoc-{actor.name}", daemon=True).start()
        self._servers.append(server)
        self.addresses[actor.name] = server.server_address
        return actor

    def _roundtrip(self, dest, frame):
        addr = self.addresses.get(dest)
        if addr is None:
            raise TransportTimeout(f"no actor named {dest}")
        try:
            with socket.create_connection(addr, timeout=self.timeout) as sock:
                sock.sendall(frame)
                return _recv_frame(sock)
        except (socket.timeout, ConnectionError, OSError) as exc:
            raise TransportTimeout(f"{dest}: {exc}") from None

    def close(self):
        for s in self._servers:
            s.shutdown()
            s.server_close()
        self._servers.clear()


# --- platform ---------------------------------------------------------------

class Platform:
    """Ledger + attestation authority + one TEE node, with a simulated sequencer."""

    def __init__(self, params: GroupParams, *, confirmation_depth: int = 2, block_interval: float = 6.0,
                 n_validators: int = 4, ledger_path=None, authority: AttestationAuthority | None = None,
                 node_state: dict | None = None, tracing_key_source=None):
        self.params = params
        self.authority = authority or AttestationAuthority()
        self.ledger = Ledger(self.authority.manufacturer_pub, self.authority.service_pub,
                             n_validators=n_validators, confirmation_depth=confirmation_depth,
                             block_interval=block_interval, path=ledger_path)
        if node_state is not None:
            self.node = EnclaveNode.from_dict(params, self.authority, self.ledger, node_state,
                                              tracing_key_source=tracing_key_source)
        else:
            self.node = EnclaveNode(params, self.authority, self.ledger,
                                    tracing_key_source=tracing_key_source)
        self.auto_mine = True

    def confirm(self, txid: bytes, max_blocks: int = 1000) -> Receipt:
        """Produce blocks until ``txid`` reaches confirmation depth."""
        for _ in range(max_blocks):
            if self.ledger.is_confirmed(txid):
                return self.ledger.receipt(txid)
            self.ledger.advance_block()
        raise UnconfirmedTransaction("transaction never confirmed")

    def deploy_tracing_contract(self, result_cap: int | None = None) -> bytes:
        code = bytecode(self.params.backend_id) if result_cap is None else bytecode(self.params.backend_id, result_cap)
        bundle = self.node.deploy_contract(code)
        pi = self.authority.verify_attestation(bundle.attestation)
        self.confirm(self.node.publish(bundle, pi))
        return bundle.contract_id


def contract_public_info(ledger: Ledger, params: GroupParams, contract_id: bytes):
    """(pk_in, enclave_pub) read from the confirmed deploy transaction."""
    found = ledger.query_by_contract(contract_id, DEPLOY)
    if not found:
        raise UnknownContract(f"no confirmed deployment of {contract_id.hex()}")
    tx = found[0][0]
    report = AttestationReport.from_bytes(tx.proof)
    return params.decode_element(tx.output_ct), report.enclave_pub


# --- actors -----------------------------------------------------------------

class NodeEndpoint(Actor):
    """Network face of the TEE node: TRACE_REQ / TRACE_ACK / TRACE_RESULT."""

    role = "node"

    def __init__(self, name: str, platform: Platform):
        super().__init__(name)
        self.platform = platform
        self.node = platform.node

    def on_trace_req(self, msg):
        p = msg["payload"]
        params = self.node.params
        hello = ChannelHello.from_payload(params, p["hello"])
        accept = self.node.accept_channel(hello)
        try:
            res = self.node.execute(hello.contract_id, bytes.fromhex(p["input"]), channel_id=accept.channel_id)
        except RevocError:
            self.node.close_channel(accept.channel_id)
            raise
        sealed = self.node.channel_send(accept.channel_id, res.to_bytes())
        return message("TRACE_REQ", {"accept": accept.to_payload(), "sealed": sealed.hex()}, msg["session"])

    def on_trace_ack(self, msg):
        txid = self.node.acknowledge(msg["payload"]["request_id"])
        return message("TRACE_ACK", {"txid": txid.hex()}, msg["session"])

    def on_trace_result(self, msg):
        p = msg["payload"]
        txid = bytes.fromhex(p["txid"])
        if self.platform.auto_mine and not self.platform.ledger.is_confirmed(txid):
            self.platform.confirm(txid)
        sealed = self.node.release_output(p["channel_id"], txid)
        self.node.close_channel(p["channel_id"])
        return message("TRACE_RESULT", {"sealed": sealed.hex()}, msg["session"])


@dataclass
class _Pending:
    session: object
    created: float


class Issuer(Actor):
    role = "issuer"

    def __init__(self, name: str, key: IssuerKey, y_t: GroupElement, tracer_keys: TracerSessionKey | None = None):
        super().__init__(name)
        self.key = key
        self.y_t = y_t
        self.registry = SessionRegistry()
        self.tracer_keys = tracer_keys
        self.pending: dict[str, _Pending] = {}
        self._counter = 0

    def on_issue1(self, msg):
        p = msg["payload"]
        params = self.key.params
        xi = params.decode_element(bytes.fromhex(p["xi"]))
        msg2, session = issuer_session_start(self.key, self.y_t, Msg1.from_payload(params, p["msg1"]),
                                             xi, p.get("label", ""))
        self._counter += 1
        handle = f"{self.name}-{self._counter}"
        self.pending[handle] = _Pending(session, time.monotonic())
        return message("ISSUE2", {"msg2": msg2.to_payload()}, handle)

    def on_issue3(self, msg):
        pending = self.pending.pop(msg["session"], None)
        if pending is None:
            raise OutOfOrderMessage(f"no issuance session {msg['session']!r}")
        msg3 = Msg3.from_payload(self.key.params, msg["payload"]["msg3"])
        msg4 = issuer_respond(pending.session, msg3, self.registry)
        return message("ISSUE4", {"msg4": msg4.to_payload()}, msg["session"])

    def expire_pending(self, max_age: float = 0.0) -> int:
        """Discard in-flight sessions older than ``max_age`` seconds (abandoned by the user)."""
        now = time.monotonic()
        stale = [h for h, p in self.pending.items() if now - p.created >= max_age]
        for h in stale:
            del self.pending[h]
        return len(stale)


class Verifier(Actor):
    role = "verifier"

    def __init__(self, name: str, issuer_pub: IssuerPublicKey, tracer_keys: TracerSessionKey | None = None):
        super().__init__(name)
        self.issuer_pub = issuer_pub
        self.tracer_keys = tracer_keys
        self.seen: list[Credential] = []

    def on_show(self, msg):
        cred = Credential.from_dict(self.issuer_pub.params, msg["payload"]["credential"])
        ok = verify_sig(self.issuer_pub, cred)
        if ok:
            self.seen.append(cred)
        return message("SHOW", {"valid": int(ok)}, msg["session"])


class User:
    """Client-only actor: never receives unsolicited messages."""

    role = "user"

    def __init__(self, identity: UserIdentity, issuer_pub: IssuerPublicKey, y_t: GroupElement):
        self.identity = identity
        self.issuer_pub = issuer_pub
        self.y_t = y_t
        self.credentials: list[Credential] = []


class UserAbort(Exception):
    """Raised by a test hook to make the user walk away mid-protocol."""


def run_issuance(bus: Bus, user: User, issuer: str, m, *, abort_after_msg2: bool = False) -> Credential:
    """The four issuing moves between ``user`` and the issuer endpoint.

    Nothing here touches the ledger.
    """
    params = user.identity.params
    msg1, us = user_start(user.identity, user.issuer_pub, user.y_t)
    reply = bus.request(issuer, message("ISSUE1", {"xi": user.identity.xi.encode().hex(),
                                                   "label": user.identity.label,
                                                   "msg1": msg1.to_payload()}))
    session = reply["session"]
    msg2 = Msg2.from_payload(params, reply["payload"]["msg2"])
    if abort_after_msg2:
        raise UserAbort(session)
    msg3, us = user_blind(us, msg2, m)
    reply = bus.request(issuer, message("ISSUE3", {"msg3": msg3.to_payload()}, session))
    cred = user_finalize(us, Msg4.from_payload(params, reply["payload"]["msg4"]), m)
    user.credentials.append(cred)
    return cred


def run_verification(bus: Bus, cred: Credential, verifier: str) -> bool:
    reply = bus.request(verifier, message("SHOW", {"credential": cred.to_dict()}))
    return bool(reply["payload"]["valid"])


# --- tracing ----------------------------------------------------------------

@dataclass
class TraceOutcome:
    result: TraceResult
    receipt: Receipt
    txid: bytes
    request_bytes: int
    latency: float = 0.0
    labels: list = field(default_factory=list)

    @property
    def element(self) -> GroupElement:
        return self.result.results[0]


class Tracer:
    """Client side of anonymity revocation for an issuer or verifier."""

    def __init__(self, keys: TracerSessionKey, ledger: Ledger, contract_id: bytes, node: str = "node"):
        self.keys = keys
        self.ledger = ledger
        self.contract_id = contract_id
        self.node = node
        self.linkages: list[tuple[GroupElement, GroupElement]] = []

    @property
    def params(self):
        return self.keys.params

    def submit(self, bus: Bus, request: TraceRequest):
        """Steps 1-5: channel, encrypted request, sealed reply, acknowledgement.

        Returns (channel, txid, input_size).
        """
        pk_in, enclave_pub = contract_public_info(self.ledger, self.params, self.contract_id)
        hello = ChannelHello.create(self.keys, self.contract_id)
        input_ct = asm_encrypt(pk_in, request.to_bytes(), self.contract_id)
        reply = bus.request(self.node, message("TRACE_REQ", {"hello": hello.to_payload(),
                                                             "input": input_ct.hex()}))
        accept = ChannelAccept.from_payload(self.params, reply["payload"]["accept"])
        channel = complete_channel(self.keys, hello, accept, enclave_pub)
        try:
            fields = frames.unpack(channel.open(bytes.fromhex(reply["payload"]["sealed"])), 6)
        except RevocError as exc:
            raise ChannelFailure(str(exc)) from None
        request_id = fields[0].decode()
        reply = bus.request(self.node, message("TRACE_ACK", {"request_id": request_id}))
        return channel, bytes.fromhex(reply["payload"]["txid"]), len(input_ct)

    def collect(self, bus: Bus, channel, txid: bytes) -> TraceResult:
        """Steps 6-7: fetch the released plaintext over the channel."""
        reply = bus.request(self.node, message("TRACE_RESULT", {"channel_id": channel.channel_id,
                                                                "txid": txid.hex()}))
        try:
            result, _ = read_release(self.params, channel, bytes.fromhex(reply["payload"]["sealed"]))
        except RevocError as exc:
            raise ChannelFailure(str(exc)) from None
        channel.close()
        return result

    def trace(self, bus: Bus, request: TraceRequest) -> TraceOutcome:
        start = self.ledger.now()
        channel, txid, size = self.submit(bus, request)
        result = self.collect(bus, channel, txid)
        receipt = self.ledger.receipt(txid)
        kind = request.batch_kind if request.kind == BATCH else request.kind
        if kind in (CREDENTIAL, IDENTITY):
            sources = [self.params.decode_element(op) for op in request.operands]
            pairs = zip(sources, result.results) if kind == CREDENTIAL else zip(result.results, sources)
            self.linkages.extend(pairs)
        return TraceOutcome(result, receipt, txid, size, self.ledger.now() - start)


def run_trace_credential(bus: Bus, tracer: Tracer, session_id: GroupElement) -> TraceOutcome:
    return tracer.trace(bus, TraceRequest.credential(session_id))


def run_trace_identity(bus: Bus, tracer: Tracer, zeta1: GroupElement,
                       registry: SessionRegistry) -> TraceOutcome:
    """Trace ``zeta1`` back to a session id and resolve the user label.

    An unknown session raises ``UnknownSession``; the trace transaction stays on the ledger.
    """
    out = tracer.trace(bus, TraceRequest.identity(zeta1))
    record = registry.lookup(out.element)
    if record is None:
        raise UnknownSession(f"traced element {out.element.encode().hex()} is not in the issuer registry",
                             outcome=out)
    out.labels = [record.label]
    return out


def run_batch_trace(bus: Bus, tracer: Tracer, kind: str, operands,
                    registry: SessionRegistry | None = None) -> TraceOutcome:
    out = tracer.trace(bus, TraceRequest.batch(kind, operands))
    if kind == IDENTITY and registry is not None:
        out.labels = [(r.label if (r := registry.lookup(s)) else None) for s in out.result.results]
    return out


def register_tracing_params(bus: Bus, deployer: Tracer, issuer_pub: IssuerPublicKey) -> GroupElement:
    """Generate the tracing key pair inside the contract; returns y_t."""
    out = deployer.trace(bus, TraceRequest.register(deployer.params, issuer_pub))
    return out.element.precompute()


# --- inspection -------------------------------------------------------------

@dataclass(frozen=True)
class InspectionPolicy:
    """Anomaly rules: (a) caller allowlist, (b) per-caller rate per window,
    (c) permitted time windows, (d) chain integrity."""

    allowlist: frozenset | None = None
    rate_threshold: int | None = 10
    rate_window: float = 60.0
    permitted_windows: tuple | None = None
    kinds: tuple = TRACE_KINDS

    def to_dict(self):
        return {"allowlist": sorted(a.hex() for a in self.allowlist) if self.allowlist is not None else None,
                "rate_threshold": self.rate_threshold, "rate_window": self.rate_window,
                "permitted_windows": [list(w) for w in self.permitted_windows] if self.permitted_windows else None,
                "kinds": list(self.kinds)}

    @classmethod
    def from_dict(cls, d):
        allow = d.get("allowlist")
        windows = d.get("permitted_windows")
        return cls(frozenset(bytes.fromhex(a) for a in allow) if allow is not None else None,
                   d.get("rate_threshold", 10), d.get("rate_window", 60.0),
                   tuple(tuple(w) for w in windows) if windows else None,
                   tuple(d.get("kinds", TRACE_KINDS)))


@dataclass(frozen=True)
class AuditReport:
    contract_id: str
    entries: tuple
    summary: dict
    anomalies: tuple
    chain_ok: bool

    def to_dict(self):
        return {"contract_id": self.contract_id, "entries": list(self.entries), "summary": self.summary,
                "anomalies": list(self.anomalies), "chain_ok": self.chain_ok}

    def to_json(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def run_inspection(ledger: Ledger, contract_id: bytes, window: tuple[int, int] | None = None,
                   policy: InspectionPolicy | None = None) -> AuditReport:
    """Collect the contract's confirmed tracing transactions and flag anomalies.

    The report depends only on ledger contents.
    """
    policy = policy or InspectionPolicy()
    found = ledger.query_by_contract(contract_id, policy.kinds, window=window)
    entries = [{"txid": tx.txid.hex(), "height": r.height, "contract_id": tx.contract_id.hex(),
                "kind": tx.kind, "caller": tx.caller.hex(), "timestamp": tx.timestamp}
               for tx, r in found]
    anomalies = []
    check = verify_bytes(ledger.to_bytes())
    if not check.ok:
        anomalies.append({"rule": "d", "height": check.first_bad_height, "detail": check.reason})
    if policy.allowlist is not None:
        for e, (tx, _) in zip(entries, found):
            if tx.caller not in policy.allowlist:
                anomalies.append({"rule": "a", "txid": e["txid"], "detail": "caller not on tracer allowlist"})
    if policy.rate_threshold is not None:
        buckets = defaultdict(list)
        for e in entries:
            buckets[(e["caller"], int(e["timestamp"] // policy.rate_window))].append(e["txid"])
        for (caller, bucket), txids in sorted(buckets.items()):
            if len(txids) > policy.rate_threshold:
                anomalies.append({"rule": "b", "caller": caller, "window_start": bucket * policy.rate_window,
                                  "count": len(txids),
                                  "detail": f"{len(txids)} traces exceed {policy.rate_threshold} per window"})
    if policy.permitted_windows:
        for e in entries:
            if not any(lo <= e["timestamp"] < hi for lo, hi in policy.permitted_windows):
                anomalies.append({"rule": "c", "txid": e["txid"], "detail": "trace outside permitted time windows"})
    summary = {"total": len(entries),
               "by_kind": dict(sorted(Counter(e["kind"] for e in entries).items())),
               "by_caller": dict(sorted(Counter(e["caller"] for e in entries).items()))}
    return AuditReport(contract_id.hex(), tuple(entries), summary, tuple(anomalies), check.ok)


class Inspector(Actor):
    role = "inspector"

    def __init__(self, name: str, ledger: Ledger, policy: InspectionPolicy | None = None):
        super().__init__(name)
        self.ledger = ledger
        self.policy = policy

    def inspect(self, contract_id: bytes, window=None) -> AuditReport:
        return run_inspection(self.ledger, contract_id, window, self.policy)

    def on_inspect_req(self, msg):
        p = msg["payload"]
        window = tuple(p["window"]) if p.get("window") else None
        policy = InspectionPolicy.from_dict(p["policy"]) if p.get("policy") else self.policy
        report = run_inspection(self.ledger, bytes.fromhex(p["contract_id"]), window, policy)
        return message("INSPECT_REPORT", {"report": report.to_dict()}, msg["session"])


def request_inspection(bus: Bus, inspector: str, contract_id: bytes, window=None,
                       policy: InspectionPolicy | None = None) -> dict:
    payload = {"contract_id": contract_id.hex(), "window": list(window) if window else None,
               "policy": policy.to_dict() if policy else None}
    return bus.request(inspector, message("INSPECT_REQ", payload))["payload"]["report"]
