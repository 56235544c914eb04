"""Exception hierarchy.

Every error carries a short kebab-case ``code`` so the CLI and the wire
protocol can report failures without leaking Python class names.
"""

from __future__ import annotations


class RevocError(Exception):
    code = "error"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details

    def __str__(self):
        base = super().__str__()
        return base if base.startswith(self.code) else f"{self.code}: {base}"


def _make(name: str, code: str, base=RevocError):
    return type(name, (base,), {"code": code})


# group
UnsupportedBackend = _make("UnsupportedBackend", "unsupported-backend")
MalformedEncoding = _make("MalformedEncoding", "malformed-encoding")
NotInSubgroup = _make("NotInSubgroup", "not-in-subgroup")

# sigma
ZeroSecret = _make("ZeroSecret", "zero-secret")

# fbs
BadDleqProof = _make("BadDleqProof", "bad-dleq-proof")
BadZ1Proof = _make("BadZ1Proof", "bad-z1-proof")
OutOfOrderMessage = _make("OutOfOrderMessage", "out-of-order-message")
ProtocolFailure = _make("ProtocolFailure", "protocol-failure")

# enclave
UnknownContractKind = _make("UnknownContractKind", "unknown-contract-kind")
BadAttestation = _make("BadAttestation", "bad-attestation")
UnknownContract = _make("UnknownContract", "unknown-contract")
HandshakeFailure = _make("HandshakeFailure", "handshake-failure")
ChannelAuthFailure = _make("ChannelAuthFailure", "channel-auth-failure")
ChannelClosed = _make("ChannelClosed", "channel-closed")
BadInputCiphertext = _make("BadInputCiphertext", "bad-input-ciphertext")
StaleState = _make("StaleState", "stale-state")
ContractFault = _make("ContractFault", "contract-fault")
UnconfirmedTransaction = _make("UnconfirmedTransaction", "unconfirmed-transaction")

# contract
AlreadyRegistered = _make("AlreadyRegistered", "already-registered", ContractFault)
NotRegistered = _make("NotRegistered", "not-registered", ContractFault)
EmptyBatch = _make("EmptyBatch", "empty-batch", ContractFault)


class BadOperand(ContractFault):
    code = "bad-operand"

    def __init__(self, message: str = "", index: int | None = None):
        super().__init__(message or f"operand {index} is not a valid group element", index=index)
        self.index = index


# ledger
InvalidProof = _make("InvalidProof", "invalid-proof")
InvalidAttestation = _make("InvalidAttestation", "invalid-attestation")
MalformedTx = _make("MalformedTx", "malformed-tx")

# parties
UnknownSession = _make("UnknownSession", "unknown-session")
TransportTimeout = _make("TransportTimeout", "transport-timeout")
ChannelFailure = _make("ChannelFailure", "channel-failure")


_BY_CODE = {cls.code: cls for cls in list(globals().values())
            if isinstance(cls, type) and issubclass(cls, RevocError)}


def from_code(code: str, message: str = "") -> RevocError:
    """Rebuild an error received over the wire."""
    return _BY_CODE.get(code, RevocError)(message)
