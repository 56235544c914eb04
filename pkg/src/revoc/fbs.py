"""Fair blind signatures: key generation, the four-move issuing protocol,
verification and the local matching predicates.

The issuer proves knowledge of ``x`` (``y = g^x``) OR of the tag-side
witness, in a witness-indistinguishable OR composition where the tag side
is always simulated.  The user blinds the transcript by raising the tag-side
values to its private key ``gamma`` and re-randomizing the commitments,
which leaves ``zeta1 = z1^gamma = y_t^(gamma*upsilon)``.  That is exactly
what the tracing contract recovers from the issuer's session identifier
``xi^upsilon`` with the tracing key ``x_t``.

Messages:

    user   -> issuer  Msg1(z_u, dleq)            z_u = z^(1/gamma)
    issuer -> user    Msg2(z1, z2, pf, a, b1, b2)
    user   -> issuer  Msg3(e)
    issuer -> user    Msg4(r, c, s1, s2, d)
"""

from __future__ import annotations

import base64
import json
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

from .errors import (BadDleqProof, BadZ1Proof, MalformedEncoding, OutOfOrderMessage,
                     ProtocolFailure)
from .group import SEP, GroupElement, GroupParams, setup
from .sigma import DlogEqProof, DlogProof, prove_dlog, prove_dlog_eq, verify_dlog, verify_dlog_eq

H2_TAG = b"H2"


def _hex(params, v):
    return v.encode().hex() if isinstance(v, GroupElement) else params.encode_scalar(v).hex()


def _el(params, s):
    return params.decode_element(bytes.fromhex(s))


def _sc(params, s):
    return params.decode_scalar(bytes.fromhex(s))


def _as_bytes(m) -> bytes:
    return m.encode("utf-8") if isinstance(m, str) else bytes(m)


# --- keys -------------------------------------------------------------------

def tag_key(params: GroupParams, y: GroupElement) -> GroupElement:
    """z = H1(p, q, g, h, y)."""
    return params.hash_to_group(params.to_bytes() + SEP + y.encode())


@dataclass(frozen=True)
class IssuerPublicKey:
    y: GroupElement
    z: GroupElement

    @property
    def params(self):
        return self.y.params

    def to_dict(self):
        return {"backend": self.params.backend_id, "y": self.y.encode().hex(), "z": self.z.encode().hex()}

    @classmethod
    def from_dict(cls, d):
        params = setup(128, d["backend"])
        return cls(_el(params, d["y"]), _el(params, d["z"]))


@dataclass(frozen=True)
class IssuerKey:
    x: int
    y: GroupElement
    z: GroupElement

    @property
    def params(self):
        return self.y.params

    @property
    def public(self) -> IssuerPublicKey:
        return IssuerPublicKey(self.y, self.z)

    def to_dict(self):
        d = self.public.to_dict()
        d.update(role="issuer", x=_hex(self.params, self.x))
        return d

    @classmethod
    def from_dict(cls, d):
        params = setup(128, d["backend"])
        key = cls(_sc(params, d["x"]), _el(params, d["y"]), _el(params, d["z"]))
        if params.g ** key.x != key.y or tag_key(params, key.y) != key.z:
            raise MalformedEncoding("inconsistent issuer key file")
        return key


def issuer_keygen(params: GroupParams, x: int | None = None) -> IssuerKey:
    x = params.random_scalar() if x is None else x % params.q
    y = params.g ** x
    z = tag_key(params, y).precompute()
    y.precompute()
    return IssuerKey(x, y, z)


@dataclass(frozen=True)
class UserIdentity:
    gamma: int
    xi: GroupElement
    label: str = ""

    @property
    def params(self):
        return self.xi.params

    def to_dict(self):
        return {"backend": self.params.backend_id, "role": "user", "label": self.label,
                "gamma": _hex(self.params, self.gamma), "xi": self.xi.encode().hex()}

    @classmethod
    def from_dict(cls, d):
        params = setup(128, d["backend"])
        return cls(_sc(params, d["gamma"]), _el(params, d["xi"]), d.get("label", ""))


def user_keygen(params: GroupParams, label: str = "", gamma: int | None = None) -> UserIdentity:
    """One user may call this repeatedly to hold several unlinkable identities."""
    gamma = params.random_scalar() if gamma is None else gamma % params.q
    if gamma == 0:
        raise ValueError("gamma must be invertible")
    return UserIdentity(gamma, params.g ** gamma, label)


@dataclass(frozen=True)
class TracerSessionKey:
    iota: int
    tau: GroupElement

    @property
    def params(self):
        return self.tau.params

    def to_dict(self):
        return {"backend": self.params.backend_id, "role": "tracer",
                "iota": _hex(self.params, self.iota), "tau": self.tau.encode().hex()}

    @classmethod
    def from_dict(cls, d):
        params = setup(128, d["backend"])
        return cls(_sc(params, d["iota"]), _el(params, d["tau"]))


def tracer_keygen(params: GroupParams, iota: int | None = None) -> TracerSessionKey:
    iota = params.random_scalar() if iota is None else iota % params.q
    return TracerSessionKey(iota, params.g ** iota)


# --- wire messages ----------------------------------------------------------

_PROOFS = (DlogProof, DlogEqProof)


class _Message:
    """Fields listed in ``_fields``; elements and scalars hex-encoded on the wire."""

    _fields: tuple = ()
    _frame_tag = b""

    def to_payload(self) -> dict:
        params = self._params()
        out = {}
        for name in self._fields:
            v = getattr(self, name)
            out[name] = v.to_bytes().hex() if isinstance(v, _PROOFS) else _hex(params, v)
        return out

    def to_bytes(self) -> bytes:
        params = self._params()
        parts = []
        for name in self._fields:
            v = getattr(self, name)
            parts.append(v.to_bytes() if isinstance(v, _PROOFS) else bytes.fromhex(_hex(params, v)))
        return self._frame_tag + b"".join(parts)


@dataclass(frozen=True)
class Msg1(_Message):
    z_u: GroupElement
    proof: DlogEqProof
    _fields = ("z_u", "proof")
    _frame_tag = b"\x01"

    def _params(self):
        return self.z_u.params

    @classmethod
    def from_payload(cls, params, d):
        return cls(_el(params, d["z_u"]), DlogEqProof.from_bytes(params, bytes.fromhex(d["proof"])))


@dataclass(frozen=True)
class Msg2(_Message):
    z1: GroupElement
    z2: GroupElement
    proof: DlogProof
    a: GroupElement
    b1: GroupElement
    b2: GroupElement
    _fields = ("z1", "z2", "proof", "a", "b1", "b2")
    _frame_tag = b"\x02"

    def _params(self):
        return self.z1.params

    @classmethod
    def from_payload(cls, params, d):
        return cls(_el(params, d["z1"]), _el(params, d["z2"]),
                   DlogProof.from_bytes(params, bytes.fromhex(d["proof"])),
                   _el(params, d["a"]), _el(params, d["b1"]), _el(params, d["b2"]))


@dataclass(frozen=True)
class Msg3(_Message):
    e: int
    params: GroupParams = field(repr=False, compare=False)
    _fields = ("e",)
    _frame_tag = b"\x03"

    def _params(self):
        return self.params

    @classmethod
    def from_payload(cls, params, d):
        return cls(_sc(params, d["e"]), params)


@dataclass(frozen=True)
class Msg4(_Message):
    r: int
    c: int
    s1: int
    s2: int
    d: int
    params: GroupParams = field(repr=False, compare=False)
    _fields = ("r", "c", "s1", "s2", "d")
    _frame_tag = b"\x04"

    def _params(self):
        return self.params

    @classmethod
    def from_payload(cls, params, p):
        return cls(*(_sc(params, p[k]) for k in cls._fields), params)


# --- credential -------------------------------------------------------------

@dataclass(frozen=True)
class Credential:
    zeta1: GroupElement
    rho: int
    omega_bar: int
    sigma1: int
    sigma2: int
    delta: int
    m: bytes

    SCALARS = ("rho", "omega_bar", "sigma1", "sigma2", "delta")

    @property
    def params(self):
        return self.zeta1.params

    def to_dict(self):
        d = {"zeta1": self.zeta1.encode().hex()}
        for name in self.SCALARS:
            d[name] = _hex(self.params, getattr(self, name))
        d["m"] = base64.b64encode(self.m).decode("ascii")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, params, d):
        return cls(_el(params, d["zeta1"]), *(_sc(params, d[n]) for n in cls.SCALARS),
                   base64.b64decode(d["m"]))


def _h2(params, zeta1, alpha, beta1, beta2, m):
    return params.hash_to_scalar(H2_TAG, [zeta1, alpha, beta1, beta2, m])


def verify_sig(issuer_pub: IssuerPublicKey, cred: Credential) -> bool:
    """omega_bar + delta == H2(zeta1 | g^rho y^omega_bar | g^sigma1 zeta1^delta
    | h^sigma2 (z/zeta1)^delta | m)."""
    params = issuer_pub.params
    if cred.params != params:
        return False
    g, h, y, z = params.g, params.h, issuer_pub.y, issuer_pub.z
    zeta1 = cred.zeta1
    if zeta1.is_identity():
        return False
    alpha = g ** cred.rho * y ** cred.omega_bar
    beta1 = g ** cred.sigma1 * zeta1 ** cred.delta
    beta2 = h ** cred.sigma2 * (z / zeta1) ** cred.delta
    expected = _h2(params, zeta1, alpha, beta1, beta2, cred.m)
    return (cred.omega_bar + cred.delta) % params.q == expected


def match_sig(issuer_pub: IssuerPublicKey, cred: Credential, traced: GroupElement) -> bool:
    return verify_sig(issuer_pub, cred) and cred.zeta1 == traced


def match_id(session_id: GroupElement, traced: GroupElement) -> bool:
    return session_id == traced


# --- session registry -------------------------------------------------------

@dataclass(frozen=True)
class SessionRecord:
    xi: GroupElement
    label: str
    issued_at: float


class SessionRegistry:
    """Issuer-side map session_id (= xi^upsilon) -> (xi, label, timestamp)."""

    def __init__(self):
        self._entries: dict[GroupElement, SessionRecord] = {}
        self._lock = threading.Lock()

    def add(self, session_id, xi, label="", issued_at=None):
        record = SessionRecord(xi, label, time.time() if issued_at is None else issued_at)
        with self._lock:
            self._entries[session_id] = record
        return record

    def lookup(self, session_id) -> SessionRecord | None:
        return self._entries.get(session_id)

    def __contains__(self, session_id):
        return session_id in self._entries

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter(list(self._entries))

    def to_dict(self):
        with self._lock:
            items = list(self._entries.items())
        return {sid.encode().hex(): {"xi": r.xi.encode().hex(), "label": r.label, "issued_at": r.issued_at}
                for sid, r in items}

    @classmethod
    def from_dict(cls, params, d):
        reg = cls()
        for sid, r in d.items():
            reg.add(_el(params, sid), _el(params, r["xi"]), r["label"], r["issued_at"])
        return reg


# --- issuing protocol -------------------------------------------------------

class Stage(Enum):
    STARTED = "started"
    BLINDED = "blinded"
    RESPONDED = "responded"
    FINALIZED = "finalized"


@dataclass
class UserSession:
    params: GroupParams
    lam: int
    issuer_pub: IssuerPublicKey
    y_t: GroupElement
    z_u: GroupElement
    stage: Stage = Stage.STARTED
    zeta1: GroupElement | None = None
    zeta2: GroupElement | None = None
    t: tuple = ()
    alpha: GroupElement | None = None
    beta1: GroupElement | None = None
    beta2: GroupElement | None = None
    eps: int | None = None
    e: int | None = None


@dataclass
class IssuerSession:
    params: GroupParams
    key: IssuerKey
    xi: GroupElement
    label: str
    session_id: GroupElement
    upsilon: int
    z_u: GroupElement
    z1: GroupElement
    z2: GroupElement
    u: int
    s1: int
    s2: int
    d: int
    a: GroupElement
    b1: GroupElement
    b2: GroupElement
    stage: Stage = Stage.STARTED
    e: int | None = None
    r: int | None = None
    c: int | None = None


def user_start(user: UserIdentity, issuer_pub: IssuerPublicKey, y_t: GroupElement,
               *, nonce: int | None = None) -> tuple[Msg1, UserSession]:
    params = user.params
    gamma_inv = pow(user.gamma, -1, params.q)
    z_u = issuer_pub.z ** gamma_inv
    # log_g xi == log_{z_u} z == gamma
    proof = prove_dlog_eq(params.g, z_u, user.gamma, nonce=nonce)
    return Msg1(z_u, proof), UserSession(params, user.gamma, issuer_pub, y_t, z_u)


def issuer_session_start(ik: IssuerKey, y_t: GroupElement, msg1: Msg1, xi: GroupElement,
                         label: str = "", *, upsilon: int | None = None, u: int | None = None,
                         s1: int | None = None, s2: int | None = None,
                         d: int | None = None) -> tuple[Msg2, IssuerSession]:
    """Check the user's proof, derive (z1, z2) and the OR-proof commitments.

    Keyword arguments pin the randomness (transcript tests only).
    """
    params = ik.params
    if not verify_dlog_eq(params.g, xi, msg1.z_u, ik.z, msg1.proof):
        raise BadDleqProof("z_u is not z^(1/gamma) for the presented xi")
    y_t.precompute()
    while True:
        ups = params.random_scalar() if upsilon is None else upsilon % params.q
        z1 = y_t ** ups
        if not z1.is_identity() and z1 != msg1.z_u:
            break
        if upsilon is not None:
            raise ValueError("pinned upsilon yields a degenerate z1")
    z2 = msg1.z_u / z1
    proof = prove_dlog(y_t, ups)
    u = params.random_scalar() if u is None else u
    s1 = params.random_scalar() if s1 is None else s1
    s2 = params.random_scalar() if s2 is None else s2
    d = params.random_scalar() if d is None else d
    a = params.g ** u                      # y-side: real
    b1 = params.g ** s1 * z1 ** d          # tag side: simulated under challenge d
    b2 = params.h ** s2 * z2 ** d
    session = IssuerSession(params, ik, xi, label, xi ** ups, ups, msg1.z_u, z1, z2,
                            u, s1, s2, d, a, b1, b2)
    return Msg2(z1, z2, proof, a, b1, b2), session


def user_blind(us: UserSession, msg2: Msg2, m, *, t: tuple | None = None) -> tuple[Msg3, UserSession]:
    if us.stage is not Stage.STARTED:
        raise OutOfOrderMessage(f"user session is {us.stage.value}, expected started")
    params = us.params
    if msg2.z1.is_identity() or not verify_dlog(us.y_t, msg2.z1, msg2.proof):
        raise BadZ1Proof("issuer did not prove z1 = y_t^upsilon")
    if msg2.z1 * msg2.z2 != us.z_u:
        raise BadZ1Proof("z1 * z2 != z_u")
    m = _as_bytes(m)
    g, h, y, lam = params.g, params.h, us.issuer_pub.y, us.lam
    t = tuple(params.random_scalar() for _ in range(5)) if t is None else tuple(t)
    t1, t2, t3, t4, t5 = t
    zeta1 = msg2.z1 ** lam
    zeta2 = us.issuer_pub.z / zeta1
    us.alpha = msg2.a * g ** t1 * y ** t2
    us.beta1 = msg2.b1 ** lam * g ** t3 * zeta1 ** t4
    us.beta2 = msg2.b2 ** lam * h ** t5 * zeta2 ** t4
    us.eps = _h2(params, zeta1, us.alpha, us.beta1, us.beta2, m)
    us.e = (us.eps - t2 - t4) % params.q
    us.zeta1, us.zeta2, us.t = zeta1, zeta2, t
    us.stage = Stage.BLINDED
    return Msg3(us.e, params), us


def issuer_respond(session: IssuerSession, msg3: Msg3, registry: SessionRegistry | None = None,
                   *, issued_at: float | None = None) -> Msg4:
    if session.stage is not Stage.STARTED:
        raise OutOfOrderMessage(f"issuer session is {session.stage.value}, expected started")
    q = session.params.q
    session.e = msg3.e
    session.c = (msg3.e - session.d) % q
    session.r = (session.u - session.c * session.key.x) % q
    session.stage = Stage.RESPONDED
    if registry is not None:
        registry.add(session.session_id, session.xi, session.label, issued_at)
    return Msg4(session.r, session.c, session.s1, session.s2, session.d, session.params)


def user_finalize(us: UserSession, msg4: Msg4, m) -> Credential:
    if us.stage is not Stage.BLINDED:
        raise OutOfOrderMessage(f"user session is {us.stage.value}, expected blinded")
    q = us.params.q
    t1, t2, t3, t4, t5 = us.t
    cred = Credential(
        zeta1=us.zeta1,
        rho=(msg4.r + t1) % q,
        omega_bar=(msg4.c + t2) % q,
        sigma1=(us.lam * msg4.s1 + t3) % q,
        sigma2=(us.lam * msg4.s2 + t5) % q,
        delta=(msg4.d + t4) % q,
        m=_as_bytes(m),
    )
    if not verify_sig(us.issuer_pub, cred):
        raise ProtocolFailure("issuer responses do not yield a valid signature")
    us.stage = Stage.FINALIZED
    return cred


def issue(ik: IssuerKey, user: UserIdentity, y_t: GroupElement, m,
          registry: SessionRegistry | None = None) -> tuple[Credential, GroupElement]:
    """Run all four moves locally; returns (credential, session_id)."""
    msg1, us = user_start(user, ik.public, y_t)
    msg2, isess = issuer_session_start(ik, y_t, msg1, user.xi, user.label)
    msg3, us = user_blind(us, msg2, m)
    msg4 = issuer_respond(isess, msg3, registry)
    return user_finalize(us, msg4, m), isess.session_id
