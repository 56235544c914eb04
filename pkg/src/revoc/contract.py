"""The tracing contract that runs inside the enclave.

It owns the tracing key pair ``(x_t, y_t = g^x_t)``:

* credential tracing: ``session_id -> session_id^x_t`` (equals the credential's zeta1)
* identity tracing: ``zeta1 -> zeta1^(1/x_t)`` (equals the issuer's session id)

Every traced operand costs one exponentiation, which is what the meter counts.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass

from . import frames
from .errors import (AlreadyRegistered, BadOperand, ContractFault, EmptyBatch, MalformedEncoding,
                     NotInSubgroup, NotRegistered)
from .fbs import IssuerPublicKey
from .group import GroupElement, GroupParams, setup

KIND = "tracing/v1"

REGISTER = "register"
CREDENTIAL = "credential"
IDENTITY = "identity"
BATCH = "batch"

DEFAULT_RESULT_CAP = 1024


@dataclass(frozen=True)
class TraceRequest:
    kind: str
    operands: tuple[bytes, ...]
    batch_kind: str = ""

    def to_bytes(self) -> bytes:
        return frames.pack(self.kind.encode(), self.batch_kind.encode(), *self.operands)

    @classmethod
    def from_bytes(cls, data: bytes) -> "TraceRequest":
        fields = frames.unpack(data)
        if len(fields) < 2:
            raise MalformedEncoding("trace request too short")
        return cls(fields[0].decode(), tuple(fields[2:]), fields[1].decode())

    @classmethod
    def credential(cls, session_id: GroupElement) -> "TraceRequest":
        return cls(CREDENTIAL, (session_id.encode(),))

    @classmethod
    def identity(cls, zeta1: GroupElement) -> "TraceRequest":
        return cls(IDENTITY, (zeta1.encode(),))

    @classmethod
    def batch(cls, kind: str, operands) -> "TraceRequest":
        return cls(BATCH, tuple(op.encode() if isinstance(op, GroupElement) else bytes(op)
                                for op in operands), kind)

    @classmethod
    def register(cls, params: GroupParams, issuer_pub: IssuerPublicKey) -> "TraceRequest":
        return cls(REGISTER, (params.to_bytes(), issuer_pub.y.encode(), issuer_pub.z.encode()))


@dataclass(frozen=True)
class TraceResult:
    kind: str
    results: tuple[GroupElement, ...]
    meter_delta: int

    def to_bytes(self) -> bytes:
        return frames.pack(self.kind.encode(), frames.u64(self.meter_delta),
                           *(r.encode() for r in self.results))

    @classmethod
    def from_bytes(cls, params: GroupParams, data: bytes) -> "TraceResult":
        fields = frames.unpack(data)
        if len(fields) < 2:
            raise MalformedEncoding("trace result too short")
        return cls(fields[0].decode(), tuple(params.decode_element(f) for f in fields[2:]),
                   frames.read_u64(fields[1]))


def bytecode(backend_id: str, result_cap: int = DEFAULT_RESULT_CAP) -> bytes:
    """Canonical serialization of contract kind + init parameters."""
    return json.dumps({"kind": KIND, "init": {"backend": backend_id, "result_cap": result_cap}},
                      sort_keys=True, separators=(",", ":")).encode()


class TracingContract:
    kind = KIND

    def __init__(self, params: GroupParams, result_cap: int = DEFAULT_RESULT_CAP):
        self.params = params
        self.result_cap = result_cap
        self.issuer_pub: IssuerPublicKey | None = None
        self.x_t: int | None = None
        self.y_t: GroupElement | None = None
        # canonical encodings: session_id -> zeta1 and zeta1 -> session_id
        self.cred_results: OrderedDict[bytes, bytes] = OrderedDict()
        self.id_results: OrderedDict[bytes, bytes] = OrderedDict()
        self.meter = 0

    @classmethod
    def from_bytecode(cls, code: bytes) -> "TracingContract":
        manifest = json.loads(code)
        if manifest.get("kind") != KIND:
            raise ContractFault(f"not a {KIND} bytecode")
        init = manifest["init"]
        return cls(setup(128, init["backend"]), init.get("result_cap", DEFAULT_RESULT_CAP))

    @property
    def registered(self) -> bool:
        return self.x_t is not None

    def register_params(self, issuer_pub: IssuerPublicKey, x_t: int | None = None) -> GroupElement:
        if self.registered:
            raise AlreadyRegistered("tracing key already generated for this contract")
        if issuer_pub.params != self.params:
            raise ContractFault("issuer key uses a different group")
        x_t = self.params.random_scalar() if x_t is None else x_t % self.params.q
        if x_t == 0:
            raise ContractFault("tracing key must be nonzero")
        self.issuer_pub = issuer_pub
        self.x_t = x_t
        self.y_t = self.params.g ** x_t
        return self.y_t

    def _require_registered(self):
        if not self.registered:
            raise NotRegistered("tracing contract has no registered parameters")

    def _decode(self, operands) -> list[GroupElement]:
        out = []
        for i, op in enumerate(operands):
            if isinstance(op, GroupElement):
                if op.params != self.params:
                    raise BadOperand(index=i)
                out.append(op)
                continue
            try:
                out.append(self.params.decode_element(bytes(op)))
            except (MalformedEncoding, NotInSubgroup):
                raise BadOperand(index=i) from None
        return out

    def _remember(self, session_id, zeta1):
        for mapping, key, value in ((self.cred_results, session_id, zeta1),
                                    (self.id_results, zeta1, session_id)):
            mapping[key] = value
            mapping.move_to_end(key)
            while len(mapping) > self.result_cap:
                mapping.popitem(last=False)

    def _trace(self, kind, elements):
        q = self.params.q
        if kind == CREDENTIAL:
            pairs = [(s, s ** self.x_t) for s in elements]
            results = [z for _, z in pairs]
        elif kind == IDENTITY:
            inv = pow(self.x_t, -1, q)
            pairs = [(z ** inv, z) for z in elements]
            results = [s for s, _ in pairs]
        else:
            raise ContractFault(f"unknown trace kind {kind!r}")
        # all operands computed before any state write
        for s, z in pairs:
            self._remember(s.encode(), z.encode())
        self.meter += len(elements)
        return results

    def trace_credential(self, session_id) -> GroupElement:
        self._require_registered()
        return self._trace(CREDENTIAL, self._decode([session_id]))[0]

    def trace_identity(self, zeta1) -> GroupElement:
        self._require_registered()
        return self._trace(IDENTITY, self._decode([zeta1]))[0]

    def batch_trace(self, kind: str, operands) -> list[GroupElement]:
        self._require_registered()
        if not operands:
            raise EmptyBatch("batch must contain at least one operand")
        return self._trace(kind, self._decode(operands))

    def handle(self, request: TraceRequest, x_t: int | None = None) -> TraceResult:
        """Dispatch one decrypted request; raises ContractFault subclasses."""
        before = self.meter
        if request.kind == REGISTER:
            if len(request.operands) != 3 or request.operands[0] != self.params.to_bytes():
                raise ContractFault("register request does not match the contract's group")
            try:
                y = self.params.decode_element(request.operands[1])
                z = self.params.decode_element(request.operands[2])
            except (MalformedEncoding, NotInSubgroup):
                raise ContractFault("malformed issuer key") from None
            results = [self.register_params(IssuerPublicKey(y, z), x_t)]
        elif request.kind in (CREDENTIAL, IDENTITY):
            if len(request.operands) != 1:
                raise ContractFault("single trace takes exactly one operand")
            self._require_registered()
            results = self._trace(request.kind, self._decode(request.operands))
        elif request.kind == BATCH:
            results = self.batch_trace(request.batch_kind, list(request.operands))
        else:
            raise ContractFault(f"unknown request kind {request.kind!r}")
        return TraceResult(request.kind, tuple(results), self.meter - before)

    # sealed-state (de)serialization

    def to_state_bytes(self) -> bytes:
        enc = lambda e: e.encode().hex()  # noqa: E731
        state = {
            "kind": KIND,
            "backend": self.params.backend_id,
            "result_cap": self.result_cap,
            "issuer_y": enc(self.issuer_pub.y) if self.issuer_pub else None,
            "issuer_z": enc(self.issuer_pub.z) if self.issuer_pub else None,
            "x_t": self.params.encode_scalar(self.x_t).hex() if self.registered else None,
            "y_t": enc(self.y_t) if self.y_t is not None else None,
            "cred_results": [[k.hex(), v.hex()] for k, v in self.cred_results.items()],
            "id_results": [[k.hex(), v.hex()] for k, v in self.id_results.items()],
            "meter": self.meter,
        }
        return json.dumps(state, sort_keys=True).encode()

    @classmethod
    def from_state_bytes(cls, data: bytes) -> "TracingContract":
        s = json.loads(data)
        params = setup(128, s["backend"])
        dec = lambda h: params.decode_element(bytes.fromhex(h))  # noqa: E731
        c = cls(params, s["result_cap"])
        if s["x_t"] is not None:
            c.issuer_pub = IssuerPublicKey(dec(s["issuer_y"]), dec(s["issuer_z"]))
            c.x_t = params.decode_scalar(bytes.fromhex(s["x_t"]))
            c.y_t = dec(s["y_t"])
        c.cred_results = OrderedDict((bytes.fromhex(k), bytes.fromhex(v)) for k, v in s["cred_results"])
        c.id_results = OrderedDict((bytes.fromhex(k), bytes.fromhex(v)) for k, v in s["id_results"])
        c.meter = s["meter"]
        return c


CONTRACT_KINDS = {KIND: TracingContract}
