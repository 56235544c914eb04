"""Simulated TEE-powered blockchain node.

The node hosts contract enclaves.  Everything a contract keeps secret (its
input decryption key, its state key, the tracing key inside the state) stays
inside ``EnclaveNode``/``KeyManager``; the host side sees only ciphertexts.

A tracing call follows the confirm-then-release discipline:

1. ``execute`` decrypts the request and state, runs the contract, and
   returns only ciphertexts (output under a fresh single-use key, new sealed
   state) plus a signed proof.
2. ``acknowledge`` turns the pending execution into a ledger transaction.
3. ``release_output`` hands the plaintext result to the caller over its
   secure channel, and refuses until the transaction is confirmed.
"""

from __future__ import annotations

import json
import os
import secrets
import threading
from collections import defaultdict
from dataclasses import dataclass, replace

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import frames
from .attestation import (AttestationAuthority, AttestationReport, proof_message, raw_private,
                          raw_public, sha256, verify_ed25519)
from .contract import CONTRACT_KINDS, TraceRequest, TraceResult
from .errors import (BadInputCiphertext, ChannelAuthFailure, ChannelClosed, ContractFault,
                     HandshakeFailure, MalformedEncoding, NotInSubgroup, StaleState,
                     UnconfirmedTransaction, UnknownContract, UnknownContractKind)
from .fbs import TracerSessionKey
from .group import GroupElement, GroupParams
from .ledger import DEPLOY, Ledger, Transaction
from .sigma import DlogProof, prove_dlog, verify_dlog

NONCE = 12
TX_KIND = {"register": "register", "credential": "trace-credential",
           "identity": "trace-identity", "batch": "batch"}


def _hkdf(secret: bytes, info: bytes, length: int = 32, salt: bytes | None = None) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(secret)


# --- symmetric (SM) and hybrid (ASM) encryption -----------------------------

def sm_encrypt(key: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    nonce = os.urandom(NONCE)
    return nonce + AESGCM(key).encrypt(nonce, plaintext, aad)


def sm_decrypt(key: bytes, blob: bytes, aad: bytes = b"") -> bytes:
    """Raises ``cryptography.exceptions.InvalidTag`` on any tampering or wrong key."""
    if len(blob) < NONCE + 16:
        raise InvalidTag()
    return AESGCM(key).decrypt(blob[:NONCE], blob[NONCE:], aad)


def asm_encrypt(pk: GroupElement, plaintext: bytes, aad: bytes = b"") -> bytes:
    """Hashed-ElGamal KEM + AES-GCM under a group public key."""
    params = pk.params
    r = params.random_scalar()
    eph = params.g ** r
    key = _hkdf((pk ** r).encode(), b"revoc/asm" + eph.encode())
    return eph.encode() + sm_encrypt(key, plaintext, aad)


def asm_decrypt(params: GroupParams, sk: int, blob: bytes, aad: bytes = b"") -> bytes:
    n = params.element_size
    try:
        eph = params.decode_element(blob[:n])
    except (MalformedEncoding, NotInSubgroup):
        raise InvalidTag() from None
    key = _hkdf((eph ** sk).encode(), b"revoc/asm" + eph.encode())
    return sm_decrypt(key, blob[n:], aad)


# --- sealed state -----------------------------------------------------------

def state_aad(contract_id: bytes, version: int) -> bytes:
    return b"revoc/state" + contract_id + frames.u64(version)


@dataclass(frozen=True)
class SealedState:
    contract_id: bytes
    version: int
    blob: bytes

    def aad(self) -> bytes:
        return state_aad(self.contract_id, self.version)

    def to_bytes(self) -> bytes:
        return frames.pack(self.contract_id, frames.u64(self.version), self.blob)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedState":
        cid, version, blob = frames.unpack(data, 3)
        return cls(cid, frames.read_u64(version), blob)

    @property
    def hash(self) -> bytes:
        return sha256(self.to_bytes())


# --- key manager ------------------------------------------------------------

@dataclass(frozen=True)
class ContractKeys:
    sk_in: int
    pk_in: GroupElement
    key_state: bytes


class KeyManager:
    """Per-contract key material.  Only enclave code reads ``_keys``."""

    def __init__(self, params: GroupParams):
        self.params = params
        self._keys: dict[bytes, ContractKeys] = {}
        self._issued_output_keys: set[bytes] = set()
        self._lock = threading.Lock()

    def provision(self, contract_id: bytes) -> GroupElement:
        with self._lock:
            if contract_id in self._keys:
                raise ValueError("contract keys already provisioned")
            sk = self.params.random_scalar()
            keys = ContractKeys(sk, self.params.g ** sk, AESGCM.generate_key(bit_length=256))
            self._keys[contract_id] = keys
            return keys.pk_in

    def pk_in(self, contract_id: bytes) -> GroupElement:
        keys = self._keys.get(contract_id)
        if keys is None:
            raise UnknownContract(contract_id.hex())
        return keys.pk_in

    def _contract_keys(self, contract_id: bytes) -> ContractKeys:
        keys = self._keys.get(contract_id)
        if keys is None:
            raise UnknownContract(contract_id.hex())
        return keys

    def fresh_output_key(self) -> bytes:
        with self._lock:
            while True:
                key = AESGCM.generate_key(bit_length=256)
                if sha256(key) not in self._issued_output_keys:
                    self._issued_output_keys.add(sha256(key))
                    return key

    def to_dict(self) -> dict:
        with self._lock:
            return {cid.hex(): {"sk_in": self.params.encode_scalar(k.sk_in).hex(),
                                "key_state": k.key_state.hex()}
                    for cid, k in self._keys.items()}

    def load_dict(self, d: dict):
        with self._lock:
            for cid, k in d.items():
                sk = self.params.decode_scalar(bytes.fromhex(k["sk_in"]))
                self._keys[bytes.fromhex(cid)] = ContractKeys(sk, self.params.g ** sk,
                                                              bytes.fromhex(k["key_state"]))


# --- secure channel ---------------------------------------------------------

def _channel_tag(contract_id: bytes, nonce: bytes) -> bytes:
    return b"revoc/channel-open|" + contract_id + nonce


@dataclass(frozen=True)
class ChannelHello:
    tau: GroupElement
    contract_id: bytes
    nonce: bytes
    proof: DlogProof

    @classmethod
    def create(cls, keys: TracerSessionKey, contract_id: bytes) -> "ChannelHello":
        nonce = secrets.token_bytes(16)
        return cls(keys.tau, contract_id, nonce,
                   prove_dlog(keys.params.g, keys.iota, _channel_tag(contract_id, nonce)))

    def to_payload(self) -> dict:
        return {"tau": self.tau.encode().hex(), "contract_id": self.contract_id.hex(),
                "nonce": self.nonce.hex(), "proof": self.proof.to_bytes().hex()}

    @classmethod
    def from_payload(cls, params, d) -> "ChannelHello":
        cid, nonce = bytes.fromhex(d["contract_id"]), bytes.fromhex(d["nonce"])
        return cls(params.decode_element(bytes.fromhex(d["tau"])), cid, nonce,
                   DlogProof.from_bytes(params, bytes.fromhex(d["proof"]), _channel_tag(cid, nonce)))


@dataclass(frozen=True)
class ChannelAccept:
    channel_id: str
    ephemeral: GroupElement
    signature: bytes

    def to_payload(self) -> dict:
        return {"channel_id": self.channel_id, "ephemeral": self.ephemeral.encode().hex(),
                "signature": self.signature.hex()}

    @classmethod
    def from_payload(cls, params, d) -> "ChannelAccept":
        return cls(d["channel_id"], params.decode_element(bytes.fromhex(d["ephemeral"])),
                   bytes.fromhex(d["signature"]))


def _transcript(hello: ChannelHello, ephemeral: GroupElement, enclave_pub: bytes) -> bytes:
    return sha256(frames.pack(b"revoc/channel", hello.contract_id, hello.tau.encode(), hello.nonce,
                              ephemeral.encode(), enclave_pub))


class ChannelEnd:
    """One side of an authenticated-encryption channel with per-direction keys
    and sequence-number nonces.  A message that fails authentication is
    dropped and the expected sequence number does not advance."""

    def __init__(self, channel_id: str, peer: GroupElement, send_key: bytes, recv_key: bytes,
                 transcript: bytes):
        self.channel_id = channel_id
        self.peer = peer
        self.transcript = transcript
        self._send = AESGCM(send_key)
        self._recv = AESGCM(recv_key)
        self._send_seq = 0
        self._recv_seq = 0
        self.closed = False

    def seal(self, plaintext: bytes) -> bytes:
        if self.closed:
            raise ChannelClosed(self.channel_id)
        nonce = self._send_seq.to_bytes(NONCE, "big")
        self._send_seq += 1
        return nonce + self._send.encrypt(nonce, plaintext, self.transcript)

    def open(self, blob: bytes) -> bytes:
        if self.closed:
            raise ChannelClosed(self.channel_id)
        nonce = self._recv_seq.to_bytes(NONCE, "big")
        if blob[:NONCE] != nonce:
            raise ChannelAuthFailure("unexpected sequence number")
        try:
            pt = self._recv.decrypt(nonce, blob[NONCE:], self.transcript)
        except InvalidTag:
            raise ChannelAuthFailure("channel message failed authentication") from None
        self._recv_seq += 1
        return pt

    def close(self):
        self.closed = True


def _derive_channel(shared: GroupElement, transcript: bytes) -> tuple[bytes, bytes]:
    okm = _hkdf(shared.encode(), b"revoc/channel-keys", 64, salt=transcript)
    return okm[:32], okm[32:]   # tracer->enclave, enclave->tracer


def complete_channel(keys: TracerSessionKey, hello: ChannelHello, accept: ChannelAccept,
                     enclave_pub: bytes) -> ChannelEnd:
    """Tracer side: check the enclave's signature and derive the channel keys."""
    transcript = _transcript(hello, accept.ephemeral, enclave_pub)
    if accept.channel_id != transcript[:16].hex() or not verify_ed25519(enclave_pub, accept.signature, transcript):
        raise HandshakeFailure("enclave did not authenticate the handshake")
    t2e, e2t = _derive_channel(accept.ephemeral ** keys.iota, transcript)
    return ChannelEnd(accept.channel_id, accept.ephemeral, t2e, e2t, transcript)


# --- deployment -------------------------------------------------------------

@dataclass(frozen=True)
class DeployBundle:
    contract_id: bytes
    bytecode: bytes
    pk_in: GroupElement
    state_init: SealedState
    attestation: AttestationReport

    def to_transaction(self, pi: bytes, timestamp: float = 0.0, caller: bytes = b"") -> Transaction:
        return Transaction(self.contract_id, caller, DEPLOY, self.bytecode, self.pk_in.encode(),
                           self.state_init.to_bytes(), bytes(32), self.attestation.to_bytes(), pi,
                           timestamp)


@dataclass(frozen=True)
class ExecutionResult:
    request_id: str
    kind: str
    output_ct: bytes
    state: SealedState
    prev_state_hash: bytes
    proof: bytes

    def to_bytes(self) -> bytes:
        return frames.pack(self.request_id.encode(), self.kind.encode(), self.output_ct,
                           self.state.hash, self.prev_state_hash, self.proof)


@dataclass
class _Pending:
    contract_id: bytes
    caller: bytes
    kind: str
    input_ct: bytes
    result: ExecutionResult
    output_key: bytes
    channel_id: str
    txid: bytes | None = None


class EnclaveNode:
    """A TEE-powered node bound to one ledger.

    ``emitted`` records every byte string that leaves the enclave boundary and
    ``events`` the order of submissions and releases, for auditing in tests.
    """

    def __init__(self, params: GroupParams, authority: AttestationAuthority, ledger: Ledger, *,
                 signing_key: bytes | None = None, tracing_key_source=None):
        self.params = params
        self.authority = authority
        self.ledger = ledger
        self._signing = (Ed25519PrivateKey.from_private_bytes(signing_key) if signing_key
                         else Ed25519PrivateKey.generate())
        self.public_key = raw_public(self._signing)
        self.endorsement = authority.endorse(self.public_key)
        self.key_manager = KeyManager(params)
        self._tracing_key_source = tracing_key_source
        self._versions: dict[bytes, int] = {}
        self.storage: dict[bytes, SealedState] = {}   # host-side, untrusted
        self._kinds: dict[bytes, str] = {}
        self._channels: dict[str, ChannelEnd] = {}
        self._pending: dict[str, _Pending] = {}
        self._by_txid: dict[bytes, str] = {}
        self._locks = defaultdict(threading.Lock)
        self._meta = threading.Lock()
        self.emitted: list[bytes] = []
        self.events: list[tuple[str, bytes]] = []

    def _emit(self, data: bytes) -> bytes:
        self.emitted.append(data)
        return data

    # deployment

    def deploy_contract(self, code: bytes) -> DeployBundle:
        try:
            manifest = json.loads(code)
            kind = manifest["kind"]
        except (ValueError, KeyError, TypeError):
            raise UnknownContractKind("bytecode does not parse") from None
        if kind not in CONTRACT_KINDS:
            raise UnknownContractKind(kind)
        contract = CONTRACT_KINDS[kind].from_bytecode(code)
        if contract.params != self.params:
            raise UnknownContractKind("contract group differs from this node's group")
        cid = sha256(b"revoc/cid" + self.public_key + secrets.token_bytes(16))
        pk_in = self.key_manager.provision(cid)
        keys = self.key_manager._contract_keys(cid)
        state = SealedState(cid, 0, sm_encrypt(keys.key_state, contract.to_state_bytes(), state_aad(cid, 0)))
        with self._meta:
            self._versions[cid] = 0
            self._kinds[cid] = kind
            self.storage[cid] = state
        report = AttestationReport(sha256(code), cid, pk_in.encode(), sha256(state.to_bytes()),
                                   self.public_key, self.endorsement)
        report = replace(report, signature=self._signing.sign(report.body()))
        self._emit(report.to_bytes())
        self._emit(state.to_bytes())
        return DeployBundle(cid, code, pk_in, state, report)

    def publish(self, bundle: DeployBundle, pi: bytes) -> bytes:
        """Push a deployment to the consensus nodes; returns the txid."""
        tx = bundle.to_transaction(pi, self.ledger.now(), self.public_key)
        return self.ledger.submit_tx(tx)

    def deploy(self, code: bytes) -> bytes:
        """deploy_contract + attestation service + publish; returns the contract id."""
        bundle = self.deploy_contract(code)
        pi = self.authority.verify_attestation(bundle.attestation)
        self.publish(bundle, pi)
        return bundle.contract_id

    def pk_in(self, contract_id: bytes) -> GroupElement:
        return self.key_manager.pk_in(contract_id)

    # channels

    def accept_channel(self, hello: ChannelHello) -> ChannelAccept:
        if hello.contract_id not in self._versions:
            raise UnknownContract(hello.contract_id.hex())
        g = self.params.g
        if not verify_dlog(g, hello.tau, hello.proof, _channel_tag(hello.contract_id, hello.nonce)):
            raise HandshakeFailure("caller does not hold the session key for tau")
        e = self.params.random_scalar()
        eph = g ** e
        transcript = _transcript(hello, eph, self.public_key)
        t2e, e2t = _derive_channel(hello.tau ** e, transcript)
        channel_id = transcript[:16].hex()
        with self._meta:
            self._channels[channel_id] = ChannelEnd(channel_id, hello.tau, e2t, t2e, transcript)
        return ChannelAccept(channel_id, eph, self._signing.sign(transcript))

    def close_channel(self, channel_id: str):
        ch = self._channels.pop(channel_id, None)
        if ch is not None:
            ch.close()

    def channel_send(self, channel_id: str, plaintext: bytes) -> bytes:
        ch = self._channels.get(channel_id)
        if ch is None or ch.closed:
            raise ChannelClosed(channel_id)
        return self._emit(ch.seal(plaintext))

    # execution

    def execute(self, contract_id: bytes, encrypted_input: bytes, sealed_state: SealedState | None = None,
                *, channel_id: str) -> ExecutionResult:
        if contract_id not in self._versions:
            raise UnknownContract(contract_id.hex())
        channel = self._channels.get(channel_id)
        if channel is None or channel.closed:
            raise ChannelClosed(channel_id)
        with self._locks[contract_id]:
            keys = self.key_manager._contract_keys(contract_id)
            if sealed_state is None:
                sealed_state = self.storage[contract_id]
            try:
                plaintext = asm_decrypt(self.params, keys.sk_in, encrypted_input, contract_id)
            except InvalidTag:
                raise BadInputCiphertext("input does not decrypt under this contract's key") from None
            if sealed_state.contract_id != contract_id or sealed_state.version != self._versions[contract_id]:
                raise StaleState(f"state version {sealed_state.version}, latest is {self._versions[contract_id]}")
            try:
                state_pt = sm_decrypt(keys.key_state, sealed_state.blob, sealed_state.aad())
            except InvalidTag:
                raise StaleState("sealed state failed authentication") from None
            try:
                request = TraceRequest.from_bytes(plaintext)
            except (MalformedEncoding, UnicodeDecodeError):
                raise ContractFault("malformed request") from None
            if request.kind not in TX_KIND:
                raise ContractFault(f"unknown request kind {request.kind!r}")
            contract = CONTRACT_KINDS[self._kinds[contract_id]].from_state_bytes(state_pt)
            seeded = self._tracing_key_source() if self._tracing_key_source else None
            result = contract.handle(request, x_t=seeded)

            output_key = self.key_manager.fresh_output_key()
            output_ct = sm_encrypt(output_key, result.to_bytes(), b"revoc/out" + contract_id)
            new_version = sealed_state.version + 1
            new_state = SealedState(contract_id, new_version,
                                    sm_encrypt(keys.key_state, contract.to_state_bytes(),
                                               state_aad(contract_id, new_version)))
            kind = TX_KIND[request.kind]
            caller = channel.peer.encode()
            proof = self._signing.sign(proof_message(contract_id, caller, kind, encrypted_input,
                                                     output_ct, sealed_state.hash, new_state.hash))
            request_id = secrets.token_hex(16)
            res = ExecutionResult(request_id, kind, output_ct, new_state, sealed_state.hash, proof)
            self._versions[contract_id] = new_version
            self.storage[contract_id] = new_state
            self._pending[request_id] = _Pending(contract_id, caller, kind, encrypted_input, res,
                                                 output_key, channel_id)
        self._emit(output_ct)
        self._emit(new_state.to_bytes())
        return res

    def acknowledge(self, request_id: str) -> bytes:
        """The caller confirmed receipt of the ciphertexts: publish the transaction."""
        p = self._pending.get(request_id)
        if p is None:
            raise UnknownContract(f"no pending execution {request_id}")
        if p.txid is not None:
            return p.txid
        r = p.result
        tx = Transaction(p.contract_id, p.caller, p.kind, p.input_ct, r.output_ct, r.state.to_bytes(),
                         r.prev_state_hash, r.proof, b"", self.ledger.now())
        self._emit(tx.to_bytes())
        txid = self.ledger.submit_tx(tx)
        p.txid = txid
        self._by_txid[txid] = request_id
        self.events.append(("submitted", txid))
        return txid

    def release_output(self, channel_id: str, txid: bytes) -> bytes:
        """Plaintext result, sealed for the caller's channel, once ``txid`` is confirmed.

        Confirmation is read from the node's own ledger view, never from the caller.
        """
        request_id = self._by_txid.get(txid)
        if request_id is None:
            raise UnconfirmedTransaction("no such submitted execution")
        p = self._pending[request_id]
        if p.channel_id != channel_id:
            raise ChannelClosed("result belongs to another channel")
        channel = self._channels.get(channel_id)
        if channel is None or channel.closed:
            raise ChannelClosed(channel_id)
        receipt = self.ledger.receipt(txid)
        if receipt is None or not receipt.confirmed(self.ledger.confirmation_depth):
            depth = 0 if receipt is None else receipt.depth
            raise UnconfirmedTransaction(f"depth {depth} < {self.ledger.confirmation_depth}")
        output = sm_decrypt(p.output_key, p.result.output_ct, b"revoc/out" + p.contract_id)
        summary = json.dumps({"contract_id": p.contract_id.hex(), "version": p.result.state.version},
                             sort_keys=True).encode()
        sealed = channel.seal(frames.pack(output, summary))
        del self._pending[request_id]
        del self._by_txid[txid]
        self.events.append(("released", txid))
        return self._emit(sealed)

    def pending_confirmed(self) -> list[tuple[str, bytes]]:
        """(channel_id, txid) of submitted executions that may now be released."""
        return [(p.channel_id, p.txid) for p in list(self._pending.values())
                if p.txid is not None and self.ledger.is_confirmed(p.txid)]

    # persistence of the simulated trusted storage (CLI use)

    def to_dict(self) -> dict:
        return {
            "signing_key": raw_private(self._signing).hex(),
            "keys": self.key_manager.to_dict(),
            "versions": {cid.hex(): v for cid, v in self._versions.items()},
            "kinds": {cid.hex(): k for cid, k in self._kinds.items()},
            "storage": {cid.hex(): s.to_bytes().hex() for cid, s in self.storage.items()},
        }

    @classmethod
    def from_dict(cls, params, authority, ledger, d, **kw) -> "EnclaveNode":
        node = cls(params, authority, ledger, signing_key=bytes.fromhex(d["signing_key"]), **kw)
        node.key_manager.load_dict(d["keys"])
        node._versions = {bytes.fromhex(k): v for k, v in d["versions"].items()}
        node._kinds = {bytes.fromhex(k): v for k, v in d["kinds"].items()}
        node.storage = {bytes.fromhex(k): SealedState.from_bytes(bytes.fromhex(v))
                        for k, v in d["storage"].items()}
        return node


def open_channel(node: EnclaveNode, keys: TracerSessionKey, contract_id: bytes) -> ChannelEnd:
    """Run both handshake halves in-process and return the tracer's end."""
    hello = ChannelHello.create(keys, contract_id)
    accept = node.accept_channel(hello)
    return complete_channel(keys, hello, accept, node.public_key)


def read_release(params: GroupParams, channel: ChannelEnd, sealed: bytes):
    """Tracer side: open a released result.  Returns (TraceResult, state summary dict)."""
    output, summary = frames.unpack(channel.open(sealed), 2)
    return TraceResult.from_bytes(params, output), json.loads(summary)
