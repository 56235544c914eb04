"""Prime-order groups written multiplicatively.

Two backends share one interface:

* ``ec-128bit`` -- secp256k1 (cofactor 1), 33-byte compressed encodings.
* ``toy-modp`` -- the order-11 subgroup of Z_23^*, 1-byte encodings, small
  enough that every identity can be checked exhaustively.

Scalars are plain ``int`` values reduced mod ``q``.
"""

from __future__ import annotations

import hashlib
import random
import secrets
from contextlib import contextmanager
from functools import lru_cache

import gmpy2
from gmpy2 import mpz

from .errors import MalformedEncoding, NotInSubgroup, UnsupportedBackend

EC_BACKEND = "ec-128bit"
TOY_BACKEND = "toy-modp"

H1_TAG = b"H1"
SEP = b"\x7c"

# secp256k1
_P = mpz(0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEFFFFFC2F)
_N = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
_GX = mpz(0x79BE667EF9DCBBAC55A06295CE870B07029BFCDB2DCE28D959F2815B16F81798)
_GY = mpz(0x483ADA7726A3C4655DA4FBFC0E1108A8FD17B448A68554199C47D08FFB10D4B8)
_SQRT_EXP = (_P + 1) // 4

# toy group
_TOY_P, _TOY_Q, _TOY_G, _TOY_H = 23, 11, 2, 3

_WINDOW = 4

_randbelow = secrets.randbelow


@contextmanager
def seeded_randomness(seed):
    """Test hook: make every ``random_scalar`` draw reproducible."""
    global _randbelow
    saved = _randbelow
    _randbelow = random.Random(seed).randrange
    try:
        yield
    finally:
        _randbelow = saved


class GroupElement:
    """An element of a prime-order group.

    ``*`` is the group operation, ``**`` exponentiation by an integer
    and ``/`` multiplication by the inverse.
    """

    __slots__ = ("params",)

    def __truediv__(self, other):
        return self * other.inverse()

    def __pow__(self, k):
        return self.exp(k)

    def precompute(self):
        return self

    def __repr__(self):
        return f"{type(self).__name__}({self.encode().hex()})"


class ModPElement(GroupElement):
    __slots__ = ("value",)

    def __init__(self, params, value):
        self.params = params
        self.value = value

    def __mul__(self, other):
        return ModPElement(self.params, self.value * other.value % self.params.p)

    def inverse(self):
        return ModPElement(self.params, pow(self.value, -1, self.params.p))

    def exp(self, k):
        return ModPElement(self.params, pow(self.value, k % self.params.q, self.params.p))

    def is_identity(self):
        return self.value == 1

    def encode(self):
        return bytes([self.value])

    def __eq__(self, other):
        return isinstance(other, ModPElement) and self.value == other.value

    def __hash__(self):
        return hash(("modp", self.value))


class ECPoint(GroupElement):
    """Affine secp256k1 point; ``x is None`` marks the identity."""

    __slots__ = ("x", "y", "_table")

    def __init__(self, params, x, y):
        self.params = params
        self.x = x
        self.y = y
        self._table = None

    def is_identity(self):
        return self.x is None

    def __mul__(self, other):
        if self.x is None:
            return other
        if other.x is None:
            return self
        return _from_jacobian(self.params, _jadd_affine((self.x, self.y, mpz(1)), other.x, other.y))

    def inverse(self):
        if self.x is None:
            return self
        return ECPoint(self.params, self.x, (-self.y) % _P)

    def exp(self, k):
        k %= _N
        if k == 0 or self.x is None:
            return self.params.identity
        if self._table is not None:
            return _from_jacobian(self.params, _fixed_base_mul(self._table, k))
        return _from_jacobian(self.params, _window_mul(self.x, self.y, k))

    def precompute(self):
        """Build a fixed-base table; worthwhile for long-lived bases."""
        if self._table is None and self.x is not None:
            self._table = _fixed_base_table(int(self.x), int(self.y))
        return self

    def encode(self):
        if self.x is None:
            return bytes(33)
        return bytes([2 | int(self.y) & 1]) + int(self.x).to_bytes(32, "big")

    def __eq__(self, other):
        return isinstance(other, ECPoint) and self.x == other.x and self.y == other.y

    def __hash__(self):
        return hash(("ec", None if self.x is None else int(self.x), None if self.y is None else int(self.y)))


# Jacobian arithmetic for y^2 = x^3 + 7. Points are (X, Y, Z); Z == 0 is infinity.

def _jdouble(pt):
    X1, Y1, Z1 = pt
    if Z1 == 0 or Y1 == 0:
        return (mpz(1), mpz(1), mpz(0))
    A = X1 * X1 % _P
    B = Y1 * Y1 % _P
    C = B * B % _P
    D = 2 * ((X1 + B) ** 2 - A - C) % _P
    E = 3 * A % _P
    X3 = (E * E - 2 * D) % _P
    Y3 = (E * (D - X3) - 8 * C) % _P
    Z3 = 2 * Y1 * Z1 % _P
    return (X3, Y3, Z3)


def _jadd_affine(pt, x2, y2):
    X1, Y1, Z1 = pt
    if Z1 == 0:
        return (x2, y2, mpz(1))
    Z1Z1 = Z1 * Z1 % _P
    U2 = x2 * Z1Z1 % _P
    S2 = y2 * Z1 * Z1Z1 % _P
    H = (U2 - X1) % _P
    r = 2 * (S2 - Y1) % _P
    if H == 0:
        if r == 0:
            return _jdouble(pt)
        return (mpz(1), mpz(1), mpz(0))
    HH = H * H % _P
    I = 4 * HH % _P
    J = H * I % _P
    V = X1 * I % _P
    X3 = (r * r - J - 2 * V) % _P
    Y3 = (r * (V - X3) - 2 * Y1 * J) % _P
    Z3 = ((Z1 + H) ** 2 - Z1Z1 - HH) % _P
    return (X3, Y3, Z3)


def _to_affine(pt):
    X, Y, Z = pt
    if Z == 0:
        return None
    zi = gmpy2.invert(Z, _P)
    zi2 = zi * zi % _P
    return (X * zi2 % _P, Y * zi2 * zi % _P)


def _batch_affine(points):
    """Normalize many Jacobian points with a single inversion."""
    prefix = []
    acc = mpz(1)
    for _, _, Z in points:
        prefix.append(acc)
        acc = acc * Z % _P
    inv = gmpy2.invert(acc, _P)
    out = [None] * len(points)
    for i in range(len(points) - 1, -1, -1):
        X, Y, Z = points[i]
        zi = inv * prefix[i] % _P
        inv = inv * Z % _P
        zi2 = zi * zi % _P
        out[i] = (X * zi2 % _P, Y * zi2 * zi % _P)
    return out


def _from_jacobian(params, pt):
    aff = _to_affine(pt)
    if aff is None:
        return params.identity
    return ECPoint(params, aff[0], aff[1])


def _window_mul(x, y, k):
    # Multiples 1..15 of the base, normalized so every add is a mixed add.
    jac = [(x, y, mpz(1))]
    for _ in range(2 ** _WINDOW - 2):
        jac.append(_jadd_affine(jac[-1], x, y))
    if any(Z == 0 for _, _, Z in jac):
        # only possible for tiny-order points, which do not exist here
        raise ArithmeticError("degenerate multiple table")
    table = _batch_affine(jac)
    acc = (mpz(1), mpz(1), mpz(0))
    nibbles = []
    while k:
        nibbles.append(k & 15)
        k >>= 4
    for digit in reversed(nibbles):
        acc = _jdouble(_jdouble(_jdouble(_jdouble(acc))))
        if digit:
            tx, ty = table[digit - 1]
            acc = _jadd_affine(acc, tx, ty)
    return acc


@lru_cache(maxsize=64)
def _fixed_base_table(x, y):
    """table[i][j-1] = (j * 16^i) * P in affine form, i < 64."""
    rows = []
    bx, by = mpz(x), mpz(y)
    for _ in range(64):
        jac = [(bx, by, mpz(1))]
        for _ in range(14):
            jac.append(_jadd_affine(jac[-1], bx, by))
        rows.append(jac)
        nxt = _jadd_affine(jac[-1], bx, by)
        bx, by = _to_affine(nxt)
    flat = _batch_affine([p for row in rows for p in row])
    return tuple(tuple(flat[i * 15:(i + 1) * 15]) for i in range(64))


def _fixed_base_mul(table, k):
    acc = (mpz(1), mpz(1), mpz(0))
    i = 0
    while k:
        digit = k & 15
        if digit:
            tx, ty = table[i][digit - 1]
            acc = _jadd_affine(acc, tx, ty)
        k >>= 4
        i += 1
    return acc


class GroupParams:
    """Public description of a prime-order group plus its operations."""

    def __init__(self, backend_id: str):
        self.backend_id = backend_id
        if backend_id == EC_BACKEND:
            self.p = int(_P)
            self.q = _N
            self.element_size = 33
            self.scalar_size = 32
            self.identity = ECPoint(self, None, None)
            self.g = ECPoint(self, _GX, _GY).precompute()
            # nothing-up-my-sleeve second generator: nobody knows log_g(h)
            self.h = self.hash_to_group(b"revoc second generator").precompute()
        elif backend_id == TOY_BACKEND:
            self.p = _TOY_P
            self.q = _TOY_Q
            self.element_size = 1
            self.scalar_size = 1
            self.identity = ModPElement(self, 1)
            self.g = ModPElement(self, _TOY_G)
            self.h = ModPElement(self, _TOY_H)
        else:
            raise UnsupportedBackend(f"unknown backend {backend_id!r}")

    def __repr__(self):
        return f"GroupParams({self.backend_id})"

    def __eq__(self, other):
        return isinstance(other, GroupParams) and other.backend_id == self.backend_id

    def __hash__(self):
        return hash(self.backend_id)

    @property
    def is_toy(self):
        return self.backend_id == TOY_BACKEND

    def to_bytes(self) -> bytes:
        """p | q | g | h, the public parameter string hashed into the tag key."""
        width = (self.p.bit_length() + 7) // 8
        return SEP.join([
            self.p.to_bytes(width, "big"),
            self.q.to_bytes(width, "big"),
            self.g.encode(),
            self.h.encode(),
        ])

    # scalars

    def random_scalar(self) -> int:
        """Uniform in [1, q)."""
        return 1 + _randbelow(self.q - 1)

    def encode_scalar(self, k: int) -> bytes:
        return (k % self.q).to_bytes(self.scalar_size, "big")

    def decode_scalar(self, data: bytes) -> int:
        if len(data) != self.scalar_size:
            raise MalformedEncoding(f"scalar must be {self.scalar_size} bytes")
        k = int.from_bytes(data, "big")
        if k >= self.q:
            raise MalformedEncoding("scalar out of range")
        return k

    # elements

    def element(self, value) -> GroupElement:
        """Toy-backend convenience: wrap a residue, checking membership."""
        if not self.is_toy:
            raise TypeError("element() is only available on the toy backend")
        return self.decode_element(bytes([value % self.p]))

    def decode_element(self, data: bytes) -> GroupElement:
        if len(data) != self.element_size:
            raise MalformedEncoding(f"element must be {self.element_size} bytes, got {len(data)}")
        if self.is_toy:
            v = data[0]
            if not 1 <= v < self.p:
                raise MalformedEncoding("residue out of range")
            if pow(v, self.q, self.p) != 1:
                raise NotInSubgroup(f"{v} is not in the order-{self.q} subgroup")
            return ModPElement(self, v)
        if data == bytes(33):
            return self.identity
        prefix = data[0]
        if prefix not in (2, 3):
            raise MalformedEncoding("bad point prefix")
        x = mpz(int.from_bytes(data[1:], "big"))
        if x >= _P:
            raise MalformedEncoding("x coordinate out of range")
        y = _lift_x(x)
        if y is None:
            # cofactor 1: on-curve is the only membership condition
            raise NotInSubgroup("x is not on the curve")
        if (y & 1) != (prefix & 1):
            y = _P - y
        return ECPoint(self, x, y)

    # hashing

    def hash_to_group(self, data: bytes) -> GroupElement:
        """Try-and-increment: hash with a counter until a non-identity element decodes."""
        ctr = 0
        while True:
            digest = hashlib.sha256(H1_TAG + SEP + data + SEP + ctr.to_bytes(4, "big")).digest()
            ctr += 1
            if self.is_toy:
                v = int.from_bytes(digest, "big") % self.p
                if v > 1 and pow(v, self.q, self.p) == 1:
                    return ModPElement(self, v)
                continue
            x = mpz(int.from_bytes(digest, "big"))
            if x >= _P:
                continue
            y = _lift_x(x)
            if y is None:
                continue
            if y & 1:
                y = _P - y
            return ECPoint(self, x, y)

    def hash_to_scalar(self, tag: bytes, parts) -> int:
        """SHA-256 over tag | part1 | part2 ..., big-endian, reduced mod q.

        Parts may be raw bytes or group elements (encoded canonically).
        """
        if not parts:
            raise ValueError("hash_to_scalar needs at least one part")
        encoded = [p.encode() if isinstance(p, GroupElement) else bytes(p) for p in parts]
        digest = hashlib.sha256(SEP.join([tag, *encoded])).digest()
        return int.from_bytes(digest, "big") % self.q


def _lift_x(x):
    rhs = (x * x * x + 7) % _P
    y = gmpy2.powmod(rhs, _SQRT_EXP, _P)
    if y * y % _P != rhs:
        return None
    return y


_CACHE: dict[str, GroupParams] = {}


def setup(security_level: int | None = 128, backend: str = "ec") -> GroupParams:
    """Return the group for ``backend`` ("ec"/"ec-128bit" or "toy"/"toy-modp").

    The toy backend ignores ``security_level``; the ec backend supports 128 only.
    """
    backend_id = {"ec": EC_BACKEND, "toy": TOY_BACKEND}.get(backend, backend)
    if backend_id not in (EC_BACKEND, TOY_BACKEND):
        raise UnsupportedBackend(f"unknown backend {backend!r}")
    if backend_id == EC_BACKEND and security_level != 128:
        raise UnsupportedBackend(f"ec backend supports 128-bit security only, not {security_level}")
    if backend_id not in _CACHE:
        _CACHE[backend_id] = GroupParams(backend_id)
    return _CACHE[backend_id]
