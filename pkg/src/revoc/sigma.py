"""Fiat-Shamir Schnorr and Chaum-Pedersen proofs.

``prove_dlog`` shows knowledge of ``s`` with ``Y = B^s``; ``prove_dlog_eq``
shows ``log_{B1} Y1 == log_{B2} Y2``.  Both use the convention
``commitment = base^response * Y^challenge``.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import MalformedEncoding, NotInSubgroup, ZeroSecret
from .group import GroupElement, GroupParams

DLOG_TAG = b"PF-DLOG"
DLEQ_TAG = b"PF-DLEQ"


@dataclass(frozen=True)
class DlogProof:
    commitment: GroupElement
    challenge: int
    response: int
    statement_tag: bytes = DLOG_TAG

    def to_bytes(self) -> bytes:
        params = self.commitment.params
        return (self.commitment.encode() + params.encode_scalar(self.challenge)
                + params.encode_scalar(self.response))

    @classmethod
    def from_bytes(cls, params: GroupParams, data: bytes, tag: bytes = DLOG_TAG) -> "DlogProof":
        n, s = params.element_size, params.scalar_size
        if len(data) != n + 2 * s:
            raise MalformedEncoding("dlog proof has wrong length")
        return cls(params.decode_element(data[:n]), params.decode_scalar(data[n:n + s]),
                   params.decode_scalar(data[n + s:]), tag)


@dataclass(frozen=True)
class DlogEqProof:
    commitments: tuple[GroupElement, GroupElement]
    challenge: int
    response: int
    statement_tag: bytes = DLEQ_TAG

    def to_bytes(self) -> bytes:
        params = self.commitments[0].params
        return (self.commitments[0].encode() + self.commitments[1].encode()
                + params.encode_scalar(self.challenge) + params.encode_scalar(self.response))

    @classmethod
    def from_bytes(cls, params: GroupParams, data: bytes, tag: bytes = DLEQ_TAG) -> "DlogEqProof":
        n, s = params.element_size, params.scalar_size
        if len(data) != 2 * n + 2 * s:
            raise MalformedEncoding("dleq proof has wrong length")
        a1 = params.decode_element(data[:n])
        a2 = params.decode_element(data[n:2 * n])
        return cls((a1, a2), params.decode_scalar(data[2 * n:2 * n + s]),
                   params.decode_scalar(data[2 * n + s:]), tag)


def _check_secret(params, secret):
    if secret % params.q == 0:
        raise ZeroSecret("secret must be nonzero mod q")


def prove_dlog(base: GroupElement, secret: int, tag: bytes = DLOG_TAG, *, nonce: int | None = None) -> DlogProof:
    params = base.params
    _check_secret(params, secret)
    k = params.random_scalar() if nonce is None else nonce
    commitment = base ** k
    y = base ** secret
    c = params.hash_to_scalar(tag, [base, y, commitment])
    return DlogProof(commitment, c, (k - c * secret) % params.q, tag)


def verify_dlog(base: GroupElement, y: GroupElement, proof, tag: bytes | None = None) -> bool:
    """Accept iff base^response * y^challenge == commitment with a matching challenge.

    ``proof`` may be a ``DlogProof`` or its byte encoding; undecodable bytes reject.
    """
    params = base.params
    if isinstance(proof, (bytes, bytearray)):
        try:
            proof = DlogProof.from_bytes(params, bytes(proof), tag or DLOG_TAG)
        except (MalformedEncoding, NotInSubgroup):
            return False
    if tag is not None and proof.statement_tag != tag:
        return False
    if proof.challenge != params.hash_to_scalar(proof.statement_tag, [base, y, proof.commitment]):
        return False
    return base ** proof.response * y ** proof.challenge == proof.commitment


def prove_dlog_eq(b1: GroupElement, b2: GroupElement, secret: int, tag: bytes = DLEQ_TAG,
                  *, nonce: int | None = None) -> DlogEqProof:
    params = b1.params
    _check_secret(params, secret)
    k = params.random_scalar() if nonce is None else nonce
    a1, a2 = b1 ** k, b2 ** k
    y1, y2 = b1 ** secret, b2 ** secret
    c = params.hash_to_scalar(tag, [b1, y1, b2, y2, a1, a2])
    return DlogEqProof((a1, a2), c, (k - c * secret) % params.q, tag)


def verify_dlog_eq(b1: GroupElement, y1: GroupElement, b2: GroupElement, y2: GroupElement,
                   proof, tag: bytes | None = None) -> bool:
    params = b1.params
    if isinstance(proof, (bytes, bytearray)):
        try:
            proof = DlogEqProof.from_bytes(params, bytes(proof), tag or DLEQ_TAG)
        except (MalformedEncoding, NotInSubgroup):
            return False
    if tag is not None and proof.statement_tag != tag:
        return False
    a1, a2 = proof.commitments
    if proof.challenge != params.hash_to_scalar(proof.statement_tag, [b1, y1, b2, y2, a1, a2]):
        return False
    c, s = proof.challenge, proof.response
    return b1 ** s * y1 ** c == a1 and b2 ** s * y2 ** c == a2
