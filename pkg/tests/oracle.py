"""Independent naive arithmetic for the p=23, q=11 toy group.

Nothing here imports the package: exponentiation is hand-rolled
square-and-multiply, inversion is extended Euclid, and the scalar hash is
rebuilt from hashlib.
"""

import hashlib

P, Q, G, H = 23, 11, 2, 3
SEP = b"\x7c"


def modexp(base, exp, mod):
    result, base = 1, base % mod
    while exp > 0:
        if exp & 1:
            result = result * base % mod
        base = base * base % mod
        exp >>= 1
    return result


def inverse(a, mod):
    old_r, r, old_s, s = a % mod, mod, 1, 0
    while r:
        quot = old_r // r
        old_r, r = r, old_r - quot * r
        old_s, s = s, old_s - quot * s
    assert old_r == 1, "not invertible"
    return old_s % mod


def subgroup():
    """All 11 elements of the order-11 subgroup, by enumerating powers of g."""
    return sorted({modexp(G, k, P) for k in range(Q)})


def hash_scalar(tag: bytes, parts) -> int:
    data = SEP.join([tag] + [bytes([p]) if isinstance(p, int) else p for p in parts])
    return int.from_bytes(hashlib.sha256(data).digest(), "big") % Q


def issuance_transcript(x, x_t, gamma, upsilon, u, s1, s2, d, z, m: bytes):
    """Zero-blinding issuing run computed directly from the defining formulas."""
    y_t = modexp(G, x_t, P)
    y = modexp(G, x, P)
    xi = modexp(G, gamma, P)
    z_u = modexp(z, inverse(gamma, Q), P)
    z1 = modexp(y_t, upsilon, P)
    z2 = z_u * inverse(z1, P) % P
    a = modexp(G, u, P)
    b1 = modexp(G, s1, P) * modexp(z1, d, P) % P
    b2 = modexp(H, s2, P) * modexp(z2, d, P) % P
    zeta1 = modexp(z1, gamma, P)
    alpha, beta1, beta2 = a, modexp(b1, gamma, P), modexp(b2, gamma, P)
    eps = hash_scalar(b"H2", [zeta1, alpha, beta1, beta2, m])
    e = eps
    c = (e - d) % Q
    r = (u - c * x) % Q
    return dict(y=y, y_t=y_t, xi=xi, z_u=z_u, z1=z1, z2=z2, a=a, b1=b1, b2=b2, zeta1=zeta1,
                e=e, c=c, r=r, s1=s1, s2=s2, d=d, session_id=modexp(xi, upsilon, P),
                rho=r, omega_bar=c, sigma1=gamma * s1 % Q, sigma2=gamma * s2 % Q, delta=d)


def params_bytes():
    return SEP.join([bytes([P]), bytes([Q]), bytes([G]), bytes([H])])


def hash_group(data: bytes) -> int:
    """Try-and-increment into the subgroup, skipping the identity."""
    ctr = 0
    while True:
        digest = hashlib.sha256(b"H1" + SEP + data + SEP + ctr.to_bytes(4, "big")).digest()
        ctr += 1
        v = int.from_bytes(digest, "big") % P
        if v > 1 and modexp(v, Q, P) == 1:
            return v


def tag_key(y: int) -> int:
    return hash_group(params_bytes() + SEP + bytes([y]))
