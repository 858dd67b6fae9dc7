"""Independent reference implementations used as test oracles.

Nothing here imports ``sras``.  Each oracle is written from the published
algorithm or from docs/wire-formats.md, so agreement with the package is
evidence that both the code and the documentation are right.
"""

from __future__ import annotations

import hashlib
import struct

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

# -- Ed25519, straight from the RFC 8032 reference code ---------------------

_p = 2**255 - 19
_d = -121665 * pow(121666, _p - 2, _p) % _p
_q = 2**252 + 27742317777372353535851937790883648493
_sqrt_m1 = pow(2, (_p - 1) // 4, _p)


def _inv(x):
    return pow(x, _p - 2, _p)


def _add(P, Q):
    A = (P[1] - P[0]) * (Q[1] - Q[0]) % _p
    B = (P[1] + P[0]) * (Q[1] + Q[0]) % _p
    C = 2 * P[3] * Q[3] * _d % _p
    D = 2 * P[2] * Q[2] % _p
    E, F, G, H = B - A, D - C, D + C, B + A
    return (E * F, G * H, F * G, E * H)


def _mul(s, P):
    Q = (0, 1, 1, 0)
    while s > 0:
        if s & 1:
            Q = _add(Q, P)
        P = _add(P, P)
        s >>= 1
    return Q


def _recover_x(y, sign):
    if y >= _p:
        return None
    x2 = (y * y - 1) * _inv(_d * y * y + 1)
    if x2 == 0:
        return None if sign else 0
    x = pow(x2, (_p + 3) // 8, _p)
    if (x * x - x2) % _p != 0:
        x = x * _sqrt_m1 % _p
    if (x * x - x2) % _p != 0:
        return None
    if (x & 1) != sign:
        x = _p - x
    return x


_gy = 4 * _inv(5) % _p
_gx = _recover_x(_gy, 0)
_G = (_gx, _gy, 1, _gx * _gy % _p)


def _compress(P):
    zi = _inv(P[2])
    x, y = P[0] * zi % _p, P[1] * zi % _p
    return int.to_bytes(y | ((x & 1) << 255), 32, "little")


def _expand(secret):
    h = hashlib.sha512(secret).digest()
    a = int.from_bytes(h[:32], "little")
    a &= (1 << 254) - 8
    a |= 1 << 254
    return a, h[32:]


def ed25519_public(secret: bytes) -> bytes:
    return _compress(_mul(_expand(secret)[0], _G))


def ed25519_sign(secret: bytes, msg: bytes) -> bytes:
    a, prefix = _expand(secret)
    A = _compress(_mul(a, _G))
    r = int.from_bytes(hashlib.sha512(prefix + msg).digest(), "little") % _q
    R = _compress(_mul(r, _G))
    h = int.from_bytes(hashlib.sha512(R + A + msg).digest(), "little") % _q
    return R + int.to_bytes((r + h * a) % _q, 32, "little")


# -- canonical JSON, hand-rolled --------------------------------------------

_SHORT = {0x08: "\\b", 0x0C: "\\f", 0x0A: "\\n", 0x0D: "\\r", 0x09: "\\t", 0x22: '\\"', 0x5C: "\\\\"}


def _string(s: str) -> str:
    out = ['"']
    for ch in s:
        cp = ord(ch)
        if cp in _SHORT:
            out.append(_SHORT[cp])
        elif cp < 0x20 or 0x7F <= cp <= 0xFFFF:
            out.append(f"\\u{cp:04x}")
        elif cp > 0xFFFF:
            v = cp - 0x10000
            out.append(f"\\u{0xD800 + (v >> 10):04x}\\u{0xDC00 + (v & 0x3FF):04x}")
        else:
            out.append(ch)
    out.append('"')
    return "".join(out)


def canonicalize(value) -> bytes:
    def enc(v) -> str:
        if v is True:
            return "true"
        if v is False:
            return "false"
        if v is None:
            return "null"
        if isinstance(v, int):
            return str(v)
        if isinstance(v, str):
            return _string(v)
        if isinstance(v, list):
            return "[" + ",".join(enc(x) for x in v) + "]"
        if isinstance(v, dict):
            return "{" + ",".join(_string(k) + ":" + enc(v[k]) for k in sorted(v)) + "}"
        raise TypeError(type(v))

    return enc(value).encode("ascii")


def oracle_policy_hash(doc: dict) -> str:
    if "Out of Date TCB" in doc:
        doc = {("Out of Data TCB" if k == "Out of Date TCB" else k): v for k, v in doc.items()}
    return hashlib.sha256(canonicalize(doc)).hexdigest()


# -- quote verification, from the wire-format document ----------------------


class _Bad(Exception):
    pass


def _take(buf: bytes, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise _Bad("short")
    return buf[pos : pos + n], pos + n


def _platform_block(buf: bytes, pos: int) -> tuple[tuple, bytes, int]:
    start = pos
    qeid, pos = _take(buf, pos, 16)
    svn_raw, pos = _take(buf, pos, 2)
    n_raw, pos = _take(buf, pos, 2)
    fmspc, pos = _take(buf, pos, struct.unpack(">H", n_raw)[0])
    try:
        fmspc_text = fmspc.decode("utf-8")
    except UnicodeDecodeError:
        raise _Bad("fmspc") from None
    return (qeid, struct.unpack(">H", svn_raw)[0], fmspc_text), buf[start:pos], pos


def _cert(buf: bytes) -> dict:
    role, pos = _take(buf, 0, 1)
    key, pos = _take(buf, pos, 32)
    n_raw, pos = _take(buf, pos, 2)
    meta, pos = _take(buf, pos, struct.unpack(">H", n_raw)[0])
    sig, pos = _take(buf, pos, 64)
    if pos != len(buf):
        raise _Bad("cert trailing")
    return {"role": role[0], "key": key, "meta": meta, "sig": sig, "signed": buf[: len(buf) - 64]}


def _parse(quote: bytes) -> dict:
    magic, pos = _take(quote, 0, 4)
    if magic != b"SQT1":
        raise _Bad("magic")
    report, pos = _take(quote, pos, 160)
    if report[72 - 4 : 100 - 4] != bytes(28):
        raise _Bad("reserved")
    platform, block, pos = _platform_block(quote, pos)
    sig, pos = _take(quote, pos, 64)
    m_raw, pos = _take(quote, pos, 4)
    chain, pos = _take(quote, pos, struct.unpack(">I", m_raw)[0])
    if pos != len(quote):
        raise _Bad("trailing")
    certs, cpos = [], 0
    for _ in range(3):
        n_raw, cpos = _take(chain, cpos, 2)
        body, cpos = _take(chain, cpos, struct.unpack(">H", n_raw)[0])
        certs.append(_cert(body))
    if cpos != len(chain):
        raise _Bad("chain trailing")
    return {"report": report, "platform": platform, "block": block, "sig": sig, "certs": certs}


def _ed_ok(key: bytes, msg: bytes, sig: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(key).verify(sig, msg)
        return True
    except (InvalidSignature, ValueError):
        return False


def oracle_verify_quote(quote: bytes, collateral: dict) -> str:
    """Status name for ``quote`` judged against a policy-JSON collateral entry."""
    try:
        q = _parse(quote)
    except _Bad:
        return "ChainInvalid"
    data = collateral["data"]
    if isinstance(data, str):
        return "ChainInvalid"
    root_key = bytes.fromhex(data["root_key"])
    root, pck, att = q["certs"]
    if (root["role"], pck["role"], att["role"]) != (0, 1, 2):
        return "ChainInvalid"
    if root["key"] != root_key:
        return "ChainInvalid"
    for cert, issuer in ((root, root["key"]), (pck, root["key"]), (att, pck["key"])):
        if not _ed_ok(issuer, b"SRAS-CERT\x00" + cert["signed"], cert["sig"]):
            return "ChainInvalid"
    try:
        certified, block, end = _platform_block(att["meta"], 0)
        if end != len(att["meta"]):
            raise _Bad("meta trailing")
    except _Bad:
        return "ChainInvalid"
    if pck["meta"] != certified[0]:
        return "ChainInvalid"
    revoked = set(data["revoked"])
    if any(hashlib.sha256(c["key"]).hexdigest() in revoked for c in (root, pck, att)):
        return "Revoked"
    if certified[2] != collateral["fmspc"]:
        return "UnknownFmspc"
    level = "OutOfDate"
    for entry in data["tcb_levels"]:
        if entry["svn"] == certified[1]:
            level = entry["status"]
            break
    if not _ed_ok(att["key"], b"SRAS-QUOTE\x00" + q["report"] + q["block"], q["sig"]):
        return "SignatureInvalid"
    if q["block"] != block:
        return "SignatureInvalid"
    return level
