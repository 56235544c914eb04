"""Simulated remote attestation and execution proofs.

Two fixed Ed25519 keys stand in for the hardware vendor (which endorses each
enclave's signing key) and the attestation service (which counter-signs
reports it has checked).  Validators need only the two public keys.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, NoEncryption, PrivateFormat, PublicFormat

from . import frames
from .errors import BadAttestation, MalformedEncoding

ENDORSE_TAG = b"revoc/endorse"
REPORT_TAG = b"revoc/attest"
SERVICE_TAG = b"revoc/attest-service"
PROOF_TAG = b"revoc/exec-proof"


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def raw_public(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def raw_private(key: Ed25519PrivateKey) -> bytes:
    return key.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())


def verify_ed25519(public: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True)
class AttestationReport:
    """The enclave-signed report (Omega) binding code, contract id, key and initial state."""

    measurement: bytes
    contract_id: bytes
    pk_in: bytes
    state_hash: bytes
    enclave_pub: bytes
    endorsement: bytes
    signature: bytes = b""

    def body(self) -> bytes:
        return frames.pack(REPORT_TAG, self.measurement, self.contract_id, self.pk_in,
                           self.state_hash, self.enclave_pub, self.endorsement)

    def to_bytes(self) -> bytes:
        return frames.pack(self.body(), self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "AttestationReport":
        body, signature = frames.unpack(data, 2)
        fields = frames.unpack(body, 7)
        if fields[0] != REPORT_TAG:
            raise MalformedEncoding("not an attestation report")
        return cls(*fields[1:], signature=signature)


def check_report(report: AttestationReport, manufacturer_pub: bytes) -> bool:
    return (verify_ed25519(manufacturer_pub, report.endorsement, ENDORSE_TAG + report.enclave_pub)
            and verify_ed25519(report.enclave_pub, report.signature, report.body()))


def check_service_proof(report: AttestationReport, pi: bytes, service_pub: bytes) -> bool:
    return verify_ed25519(service_pub, pi, SERVICE_TAG + report.to_bytes())


class AttestationAuthority:
    """Holds the vendor and attestation-service keys of the simulation."""

    def __init__(self, manufacturer_key: bytes | None = None, service_key: bytes | None = None):
        self._manufacturer = (Ed25519PrivateKey.from_private_bytes(manufacturer_key)
                              if manufacturer_key else Ed25519PrivateKey.generate())
        self._service = (Ed25519PrivateKey.from_private_bytes(service_key)
                         if service_key else Ed25519PrivateKey.generate())
        self.manufacturer_pub = raw_public(self._manufacturer)
        self.service_pub = raw_public(self._service)

    def endorse(self, enclave_pub: bytes) -> bytes:
        return self._manufacturer.sign(ENDORSE_TAG + enclave_pub)

    def verify_attestation(self, report: AttestationReport) -> bytes:
        """Return the service proof pi, or raise BadAttestation."""
        if not check_report(report, self.manufacturer_pub):
            raise BadAttestation("enclave signature or vendor endorsement does not verify")
        return self._service.sign(SERVICE_TAG + report.to_bytes())

    def to_dict(self) -> dict:
        return {"manufacturer": raw_private(self._manufacturer).hex(),
                "service": raw_private(self._service).hex()}

    @classmethod
    def from_dict(cls, d) -> "AttestationAuthority":
        return cls(bytes.fromhex(d["manufacturer"]), bytes.fromhex(d["service"]))


def proof_message(contract_id: bytes, caller: bytes, kind: str, input_ct: bytes,
                  output_ct: bytes, old_state_hash: bytes, new_state_hash: bytes) -> bytes:
    """What the enclave signs for an execution: ids plus the four payload hashes."""
    return frames.pack(PROOF_TAG, contract_id, caller, kind.encode(), sha256(input_ct),
                       sha256(output_ct), old_state_hash, new_state_hash)
