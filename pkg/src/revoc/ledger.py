"""Append-only, hash-chained block ledger with a validator-quorum stub.

Persisted form: a file of block frames, each ``u32 length || body`` with

    body = u64 height || prev_hash || merkle_root || block_hash || u32 ntx || tx frames

``verify_file`` needs nothing but that file.
"""

from __future__ import annotations

import math
import os
import struct
import threading
from dataclasses import dataclass
from functools import cached_property

from . import frames
from .attestation import (AttestationReport, check_report, check_service_proof, proof_message,
                          sha256, verify_ed25519)
from .errors import InvalidAttestation, InvalidProof, MalformedEncoding, MalformedTx

DEPLOY = "deploy"
REGISTER = "register"
TRACE_CREDENTIAL = "trace-credential"
TRACE_IDENTITY = "trace-identity"
BATCH = "batch"
TX_KINDS = (DEPLOY, REGISTER, TRACE_CREDENTIAL, TRACE_IDENTITY, BATCH)
TRACE_KINDS = (TRACE_CREDENTIAL, TRACE_IDENTITY, BATCH)

ZERO_HASH = bytes(32)


@dataclass(frozen=True)
class Transaction:
    """A ledger entry.  For deploys, ``input_ct`` holds the bytecode,
    ``output_ct`` the contract input key, ``proof`` the attestation report and
    ``attestation`` the service proof; for executions every payload is a
    ciphertext and ``proof`` is the enclave's signature."""

    contract_id: bytes
    caller: bytes
    kind: str
    input_ct: bytes
    output_ct: bytes
    state_ct: bytes
    prev_state_hash: bytes
    proof: bytes
    attestation: bytes = b""
    timestamp: float = 0.0

    def to_bytes(self) -> bytes:
        return frames.pack(self.contract_id, self.caller, self.kind.encode(), self.input_ct,
                           self.output_ct, self.state_ct, self.prev_state_hash, self.proof,
                           self.attestation, frames.u64(round(self.timestamp * 1000)))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Transaction":
        f = frames.unpack(data, 10)
        try:
            kind = f[2].decode()
        except UnicodeDecodeError:
            raise MalformedEncoding("transaction kind is not text") from None
        return cls(f[0], f[1], kind, f[3], f[4], f[5], f[6], f[7], f[8],
                   frames.read_u64(f[9]) / 1000)

    @cached_property
    def txid(self) -> bytes:
        return sha256(self.to_bytes())


def merkle_root(leaves: list[bytes]) -> bytes:
    if not leaves:
        return sha256(b"")
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def block_hash(height: int, prev_hash: bytes, root: bytes) -> bytes:
    return sha256(frames.u64(height) + prev_hash + root)


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    txs: tuple[Transaction, ...]
    merkle_root: bytes
    block_hash: bytes

    @classmethod
    def seal(cls, height: int, prev_hash: bytes, txs) -> "Block":
        txs = tuple(txs)
        root = merkle_root([tx.txid for tx in txs])
        return cls(height, prev_hash, txs, root, block_hash(height, prev_hash, root))

    def body(self) -> bytes:
        parts = [frames.u64(self.height), self.prev_hash, self.merkle_root, self.block_hash,
                 struct.pack(">I", len(self.txs))]
        parts.extend(frames.pack(tx.to_bytes()) for tx in self.txs)
        return b"".join(parts)

    def frame(self) -> bytes:
        return frames.pack(self.body())


def _parse_block_body(body: bytes) -> Block:
    if len(body) < 8 + 32 * 3 + 4:
        raise MalformedEncoding("block body too short")
    height = frames.read_u64(body[:8])
    prev_hash, root, bhash = body[8:40], body[40:72], body[72:104]
    (ntx,) = struct.unpack(">I", body[104:108])
    tx_frames = frames.unpack(body[108:], ntx)
    return Block(height, prev_hash, tuple(Transaction.from_bytes(t) for t in tx_frames), root, bhash)


@dataclass(frozen=True)
class ChainCheck:
    ok: bool
    first_bad_height: int | None = None
    reason: str = ""
    tip_height: int | None = None


def verify_bytes(data: bytes) -> ChainCheck:
    """Recompute every link, merkle root and block hash in a serialized chain."""
    pos = 0
    expected = 0
    prev = ZERO_HASH
    while pos < len(data):
        bad = lambda why: ChainCheck(False, expected, why)  # noqa: E731
        if pos + 4 > len(data):
            return bad("truncated frame header")
        (n,) = struct.unpack_from(">I", data, pos)
        body = data[pos + 4:pos + 4 + n]
        if len(body) != n:
            return bad("truncated block frame")
        pos += 4 + n
        try:
            blk = _parse_block_body(body)
        except (MalformedEncoding, UnicodeDecodeError, struct.error) as exc:
            return bad(f"unparseable block: {exc}")
        if blk.height != expected:
            return bad(f"height {blk.height} where {expected} expected")
        if blk.prev_hash != prev:
            return bad("prev_hash does not link to previous block")
        if merkle_root([tx.txid for tx in blk.txs]) != blk.merkle_root:
            return bad("merkle root mismatch")
        if block_hash(blk.height, blk.prev_hash, blk.merkle_root) != blk.block_hash:
            return bad("block hash mismatch")
        prev = blk.block_hash
        expected += 1
    if expected == 0:
        return ChainCheck(False, 0, "no genesis block")
    return ChainCheck(True, None, "", expected - 1)


def verify_file(path) -> ChainCheck:
    with open(path, "rb") as fh:
        return verify_bytes(fh.read())


def block_spans(data: bytes) -> list[tuple[int, int]]:
    """(start, end) byte offsets of each block frame, by position in the file."""
    spans = []
    pos = 0
    while pos + 4 <= len(data):
        (n,) = struct.unpack_from(">I", data, pos)
        spans.append((pos, min(pos + 4 + n, len(data))))
        pos += 4 + n
    return spans


@dataclass(frozen=True)
class Receipt:
    txid: bytes
    height: int
    depth: int

    def confirmed(self, required: int) -> bool:
        return self.depth >= required


class Validator:
    """Re-checks attestation and enclave proofs; ``faulty`` validators reject everything."""

    def __init__(self, manufacturer_pub: bytes, service_pub: bytes, faulty: bool = False):
        self.manufacturer_pub = manufacturer_pub
        self.service_pub = service_pub
        self.faulty = faulty

    def check(self, tx: Transaction, contracts: dict[bytes, bytes]) -> None:
        if self.faulty:
            raise InvalidProof("faulty validator")
        if tx.kind not in TX_KINDS or len(tx.contract_id) != 32:
            raise MalformedTx(f"bad kind {tx.kind!r} or contract id")
        if tx.kind == DEPLOY:
            self._check_deploy(tx, contracts)
            return
        enclave_pub = contracts.get(tx.contract_id)
        if enclave_pub is None:
            raise InvalidProof("transaction for an undeployed contract")
        msg = proof_message(tx.contract_id, tx.caller, tx.kind, tx.input_ct, tx.output_ct,
                            tx.prev_state_hash, sha256(tx.state_ct))
        if not verify_ed25519(enclave_pub, tx.proof, msg):
            raise InvalidProof("enclave proof does not verify")

    def _check_deploy(self, tx, contracts):
        if not tx.attestation:
            raise InvalidAttestation("deploy carries no attestation-service proof")
        if tx.contract_id in contracts:
            raise MalformedTx("contract id already deployed")
        try:
            report = AttestationReport.from_bytes(tx.proof)
        except MalformedEncoding:
            raise InvalidAttestation("unparseable attestation report") from None
        if not (report.measurement == sha256(tx.input_ct)
                and report.contract_id == tx.contract_id
                and report.pk_in == tx.output_ct
                and report.state_hash == sha256(tx.state_ct)):
            raise InvalidAttestation("attestation does not bind this deployment")
        if not check_report(report, self.manufacturer_pub):
            raise InvalidAttestation("enclave report signature invalid")
        if not check_service_proof(report, tx.attestation, self.service_pub):
            raise InvalidAttestation("attestation-service proof invalid")


class Ledger:
    """The chain plus mempool.  A single sequencer (whoever calls
    ``advance_block``) produces blocks; other calls are serialized by a lock."""

    def __init__(self, manufacturer_pub: bytes, service_pub: bytes, *, n_validators: int = 4,
                 faulty_validators: int = 0, confirmation_depth: int = 2,
                 block_interval: float = 6.0, path=None):
        self.validators = [Validator(manufacturer_pub, service_pub, i < faulty_validators)
                           for i in range(n_validators)]
        self.quorum = math.ceil(2 * n_validators / 3)
        self.confirmation_depth = confirmation_depth
        self.block_interval = block_interval
        self.clock = 0.0
        self.path = path
        self._blocks: list[Block] = []
        self._mempool: list[Transaction] = []
        self._contracts: dict[bytes, bytes] = {}
        self._index: dict[bytes, int] = {}
        self._lock = threading.RLock()
        if path is not None and os.path.exists(path) and os.path.getsize(path) > 0:
            self._load(path)
        else:
            self._append(Block.seal(0, ZERO_HASH, ()))

    # persistence

    def _append(self, blk: Block):
        self._blocks.append(blk)
        for tx in blk.txs:
            self._index[tx.txid] = blk.height
        if self.path is not None:
            with open(self.path, "ab") as fh:
                fh.write(blk.frame())

    def _load(self, path):
        with open(path, "rb") as fh:
            data = fh.read()
        check = verify_bytes(data)
        if not check.ok:
            raise MalformedEncoding(f"ledger file fails verification at height {check.first_bad_height}: {check.reason}")
        for start, end in block_spans(data):
            blk = _parse_block_body(data[start + 4:end])
            self._blocks.append(blk)
            for tx in blk.txs:
                self._index[tx.txid] = blk.height
                if tx.kind == DEPLOY:
                    self._contracts[tx.contract_id] = AttestationReport.from_bytes(tx.proof).enclave_pub
        self.clock = self.block_interval * (len(self._blocks) - 1)

    def to_bytes(self) -> bytes:
        with self._lock:
            return b"".join(b.frame() for b in self._blocks)

    # consensus

    def submit_tx(self, tx: Transaction) -> bytes:
        with self._lock:
            errors = []
            for v in self.validators:
                try:
                    v.check(tx, self._contracts)
                except (InvalidProof, InvalidAttestation, MalformedTx) as exc:
                    errors.append(exc)
            if len(self.validators) - len(errors) < self.quorum:
                honest = [e for e in errors if "faulty" not in str(e)]
                raise (honest or errors)[0]
            if tx.kind == DEPLOY:
                self._contracts[tx.contract_id] = AttestationReport.from_bytes(tx.proof).enclave_pub
            self._mempool.append(tx)
            return tx.txid

    def advance_block(self) -> Block:
        with self._lock:
            tip = self._blocks[-1]
            blk = Block.seal(tip.height + 1, tip.block_hash, self._mempool)
            self._mempool = []
            self.clock += self.block_interval
            self._append(blk)
            return blk

    # reads

    @property
    def blocks(self) -> tuple[Block, ...]:
        return tuple(self._blocks)

    @property
    def height(self) -> int:
        return self._blocks[-1].height

    def now(self) -> float:
        return self.clock

    def tx_count(self) -> int:
        """Transactions in blocks plus pending ones."""
        with self._lock:
            return sum(len(b.txs) for b in self._blocks) + len(self._mempool)

    def is_deployed(self, contract_id: bytes) -> bool:
        return contract_id in self._contracts

    def receipt(self, txid: bytes) -> Receipt | None:
        with self._lock:
            height = self._index.get(txid)
            if height is None:
                return None
            return Receipt(txid, height, self.height - height + 1)

    def is_confirmed(self, txid: bytes) -> bool:
        r = self.receipt(txid)
        return r is not None and r.confirmed(self.confirmation_depth)

    def query_by_contract(self, contract_id: bytes, kind=None, caller: bytes | None = None,
                          window: tuple[int, int] | None = None) -> list[tuple[Transaction, Receipt]]:
        """Confirmed transactions of ``contract_id`` in chain order.

        ``kind`` may be one kind or a collection; ``window`` is an inclusive
        height range.
        """
        kinds = None if kind is None else ({kind} if isinstance(kind, str) else set(kind))
        out = []
        with self._lock:
            tip = self.height
            for blk in self._blocks:
                depth = tip - blk.height + 1
                if depth < self.confirmation_depth:
                    break
                if window is not None and not window[0] <= blk.height <= window[1]:
                    continue
                for tx in blk.txs:
                    if tx.contract_id != contract_id:
                        continue
                    if kinds is not None and tx.kind not in kinds:
                        continue
                    if caller is not None and tx.caller != caller:
                        continue
                    out.append((tx, Receipt(tx.txid, blk.height, depth)))
        return out

    def verify_chain(self) -> ChainCheck:
        return verify_bytes(self.to_bytes())
