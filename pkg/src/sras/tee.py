"""Simulated TEE quoting and DCAP-style quote verification.

A root authority certifies one PCK key per platform; each PCK key certifies
the platform's attestation key, which signs quotes.  Collateral (root key,
TCB levels, revocation list) travels inside the policy, so verification is
offline.  The binary quote layout is documented in docs/wire-formats.md.
"""

from __future__ import annotations

import enum
import struct
import threading
from dataclasses import dataclass, field, replace

from .crypto import SigningKeyPair, digest, generate_keypair, verify
from .errors import BadReportDataLength, DuplicateQeid, QuoteFormatError
from .policy import CollateralData, TcbCollateral, TcbLevel, TcbStatus

QUOTE_MAGIC = b"SQT1"
QUOTE_SIG_CONTEXT = b"SRAS-QUOTE\x00"
CERT_SIG_CONTEXT = b"SRAS-CERT\x00"
REPORT_BODY_SIZE = 96
REPORT_DATA_SIZE = 64
REPORT_SIZE = REPORT_BODY_SIZE + REPORT_DATA_SIZE
QEID_SIZE = 16
_RESERVED = 96 - 32 - 32 - 2 - 2

ROLE_ROOT, ROLE_PCK, ROLE_ATTESTATION = 0, 1, 2


class VerificationStatus(str, enum.Enum):
    UP_TO_DATE = "UpToDate"
    OUT_OF_DATE = "OutOfDate"
    REVOKED = "Revoked"
    CHAIN_INVALID = "ChainInvalid"
    SIGNATURE_INVALID = "SignatureInvalid"
    UNKNOWN_FMSPC = "UnknownFmspc"


@dataclass(frozen=True)
class EnclaveIdentity:
    mrenclave: bytes
    mrsigner: bytes
    isvprodid: int = 0
    isvsvn: int = 0


@dataclass(frozen=True)
class EnclaveReport:
    mrenclave: bytes
    mrsigner: bytes
    isvprodid: int
    isvsvn: int
    report_data: bytes

    def __post_init__(self):
        if len(self.report_data) != REPORT_DATA_SIZE:
            raise BadReportDataLength(f"report_data must be 64 bytes, got {len(self.report_data)}")
        if len(self.mrenclave) != 32 or len(self.mrsigner) != 32:
            raise ValueError("measurements must be 32 bytes")
        if not (0 <= self.isvprodid <= 0xFFFF and 0 <= self.isvsvn <= 0xFFFF):
            raise ValueError("isvprodid/isvsvn must fit in 16 bits")

    def to_bytes(self) -> bytes:
        return (
            self.mrenclave
            + self.mrsigner
            + struct.pack(">HH", self.isvprodid, self.isvsvn)
            + b"\x00" * _RESERVED
            + self.report_data
        )

    @property
    def identity(self) -> EnclaveIdentity:
        return EnclaveIdentity(self.mrenclave, self.mrsigner, self.isvprodid, self.isvsvn)


@dataclass(frozen=True)
class PlatformInfo:
    qeid: bytes
    fmspc: str
    tcb_svn: int

    def to_bytes(self) -> bytes:
        fmspc = self.fmspc.encode("utf-8")
        return self.qeid + struct.pack(">HH", self.tcb_svn, len(fmspc)) + fmspc


@dataclass(frozen=True)
class Certificate:
    role: int
    subject_key: bytes
    meta: bytes
    signature: bytes

    def signed_part(self) -> bytes:
        return bytes([self.role]) + self.subject_key + struct.pack(">H", len(self.meta)) + self.meta

    def to_bytes(self) -> bytes:
        return self.signed_part() + self.signature


@dataclass(frozen=True)
class CertChain:
    root_cert: Certificate
    pck_cert: Certificate
    attestation_key_cert: Certificate

    def certs(self) -> tuple[Certificate, Certificate, Certificate]:
        return (self.root_cert, self.pck_cert, self.attestation_key_cert)

    def to_bytes(self) -> bytes:
        body = b"".join(struct.pack(">H", len(c.to_bytes())) + c.to_bytes() for c in self.certs())
        return struct.pack(">I", len(body)) + body


@dataclass(frozen=True)
class Quote:
    report: EnclaveReport
    platform: PlatformInfo
    signature: bytes
    chain: CertChain

    def signed_part(self) -> bytes:
        return self.report.to_bytes() + self.platform.to_bytes()

    def to_bytes(self) -> bytes:
        return QUOTE_MAGIC + self.signed_part() + self.signature + self.chain.to_bytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> Quote:
        return decode_quote(data)


@dataclass(frozen=True)
class VerificationOutcome:
    status: VerificationStatus
    report: EnclaveReport | None = None

    @property
    def verified(self) -> bool:
        return self.status in (VerificationStatus.UP_TO_DATE, VerificationStatus.OUT_OF_DATE)


def key_id(public_key: bytes) -> str:
    """Revocation-list identifier of a certified key."""
    return digest(public_key).hex()


# -- binary decoding --------------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise QuoteFormatError(f"truncated at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def done(self) -> None:
        if self.pos != len(self.data):
            raise QuoteFormatError(f"{len(self.data) - self.pos} trailing bytes")


def _decode_platform(r: _Reader) -> PlatformInfo:
    qeid = r.take(QEID_SIZE)
    tcb_svn = r.u16()
    try:
        fmspc = r.take(r.u16()).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise QuoteFormatError(f"fmspc not UTF-8: {exc}") from None
    return PlatformInfo(qeid, fmspc, tcb_svn)


def _decode_cert(data: bytes) -> Certificate:
    r = _Reader(data)
    role = r.take(1)[0]
    subject_key = r.take(32)
    meta = r.take(r.u16())
    signature = r.take(64)
    r.done()
    return Certificate(role, subject_key, meta, signature)


def decode_quote(data: bytes) -> Quote:
    r = _Reader(data)
    if r.take(4) != QUOTE_MAGIC:
        raise QuoteFormatError("bad magic")
    mrenclave, mrsigner = r.take(32), r.take(32)
    isvprodid, isvsvn = r.u16(), r.u16()
    if r.take(_RESERVED) != b"\x00" * _RESERVED:
        raise QuoteFormatError("reserved report bytes must be zero")
    report = EnclaveReport(mrenclave, mrsigner, isvprodid, isvsvn, r.take(REPORT_DATA_SIZE))
    platform = _decode_platform(r)
    signature = r.take(64)
    chain_reader = _Reader(r.take(r.u32()))
    r.done()
    certs = [_decode_cert(chain_reader.take(chain_reader.u16())) for _ in range(3)]
    chain_reader.done()
    return Quote(report, platform, signature, CertChain(*certs))


def hexdump(data: bytes, width: int = 16) -> str:
    lines = []
    for off in range(0, len(data), width):
        chunk = data[off : off + width]
        text = "".join(chr(b) if 32 <= b < 127 else "." for b in chunk)
        lines.append(f"{off:08x}  {chunk.hex(' '):<{width * 3}} {text}")
    return "\n".join(lines)


# -- authorities and platforms ---------------------------------------------


def _attestation_meta(info: PlatformInfo) -> bytes:
    return info.to_bytes()


def _issue(issuer: SigningKeyPair, role: int, subject_key: bytes, meta: bytes) -> Certificate:
    unsigned = Certificate(role, subject_key, meta, b"")
    return replace(unsigned, signature=issuer.sign(CERT_SIG_CONTEXT + unsigned.signed_part()))


class RootAuthority:
    """Stand-in for the vendor CA that anchors every platform chain."""

    def __init__(self, keypair: SigningKeyPair, name: str = "SRAS simulated root CA", seed: bytes | None = None):
        self._keypair = keypair
        self._seed = seed
        self.name = name
        self.cert = _issue(keypair, ROLE_ROOT, keypair.public, name.encode("utf-8"))
        self._qeids: set[bytes] = set()
        self._lock = threading.Lock()

    @property
    def public_key(self) -> bytes:
        return self._keypair.public

    def _claim_qeid(self, qeid: bytes) -> None:
        with self._lock:
            if qeid in self._qeids:
                raise DuplicateQeid(qeid.hex())
            self._qeids.add(qeid)

    def _issue_pck(self, pck_public: bytes, qeid: bytes) -> Certificate:
        return _issue(self._keypair, ROLE_PCK, pck_public, qeid)

    def _derive_seed(self, label: bytes) -> bytes | None:
        if self._seed is None:
            return None
        return digest(self._seed + b"\x00" + label)


def create_root(seed: bytes | None = None, name: str = "SRAS simulated root CA") -> RootAuthority:
    return RootAuthority(generate_keypair(seed), name=name, seed=seed)


class Platform:
    """Simulated quoting endpoint.  Keys stay inside the object."""

    def __init__(self, info: PlatformInfo, pck: SigningKeyPair, chain_head: tuple[Certificate, Certificate],
                 seed: bytes | None = None):
        self.info = info
        self._pck = pck
        self._root_cert, self._pck_cert = chain_head
        self._seed = seed
        att_seed = None if seed is None else digest(seed + b"\x00att\x00" + struct.pack(">H", info.tcb_svn))
        self._attestation = generate_keypair(att_seed)
        self.chain = CertChain(
            self._root_cert,
            self._pck_cert,
            _issue(pck, ROLE_ATTESTATION, self._attestation.public, _attestation_meta(info)),
        )
        self._lock = threading.Lock()
        self.quote_count = 0

    @property
    def qeid(self) -> bytes:
        return self.info.qeid

    @property
    def pck_key_id(self) -> str:
        return key_id(self._pck.public)

    @property
    def attestation_key_id(self) -> str:
        return key_id(self._attestation.public)

    def reprovisioned(self, tcb_svn: int) -> Platform:
        """Same hardware (qeid, PCK) at a different TCB level."""
        return Platform(replace(self.info, tcb_svn=tcb_svn), self._pck, (self._root_cert, self._pck_cert), self._seed)

    def quote(self, body: EnclaveIdentity, report_data: bytes) -> Quote:
        return generate_quote(self, body, report_data)

    def _sign(self, msg: bytes) -> bytes:
        with self._lock:
            self.quote_count += 1
        return self._attestation.sign(msg)


def create_platform(
    root: RootAuthority,
    qeid: bytes,
    fmspc: str,
    tcb_svn: int,
    *,
    collateral_id: str | None = None,
    tcb_levels: dict[int, TcbStatus] | None = None,
) -> tuple[Platform, TcbCollateral]:
    """Provision a platform under ``root`` and return it with matching collateral."""
    qeid = bytes(qeid)
    if len(qeid) != QEID_SIZE:
        raise ValueError(f"qeid must be {QEID_SIZE} bytes")
    root._claim_qeid(qeid)
    seed = root._derive_seed(b"platform\x00" + qeid)
    pck = generate_keypair(None if seed is None else digest(seed + b"\x00pck"))
    info = PlatformInfo(qeid, fmspc, tcb_svn)
    platform = Platform(info, pck, (root.cert, root._issue_pck(pck.public, qeid)), seed)
    levels = tcb_levels if tcb_levels is not None else {tcb_svn: TcbStatus.UP_TO_DATE}
    collateral = make_collateral(root, fmspc, levels, collateral_id or f"tcb-{fmspc}")
    return platform, collateral


def make_collateral(root: RootAuthority, fmspc: str, levels: dict[int, TcbStatus], collateral_id: str,
                    revoked: tuple[str, ...] = ()) -> TcbCollateral:
    data = CollateralData(
        root_key=root.public_key,
        tcb_levels=tuple(TcbLevel(svn, TcbStatus(st)) for svn, st in sorted(levels.items(), reverse=True)),
        revoked=tuple(revoked),
    )
    return TcbCollateral(collateral_id, fmspc, data)


def generate_quote(platform: Platform, body: EnclaveIdentity, report_data: bytes) -> Quote:
    report_data = bytes(report_data)
    if len(report_data) != REPORT_DATA_SIZE:
        raise BadReportDataLength(f"report_data must be 64 bytes, got {len(report_data)}")
    report = EnclaveReport(body.mrenclave, body.mrsigner, body.isvprodid, body.isvsvn, report_data)
    unsigned = Quote(report, platform.info, b"", platform.chain)
    return replace(unsigned, signature=platform._sign(QUOTE_SIG_CONTEXT + unsigned.signed_part()))


def revoke(collateral: TcbCollateral, revoked_key_id: str) -> TcbCollateral:
    if isinstance(collateral.data, str):
        raise ValueError("placeholder collateral has no revocation list")
    if revoked_key_id in collateral.data.revoked:
        return collateral
    data = replace(collateral.data, revoked=collateral.data.revoked + (revoked_key_id,))
    return replace(collateral, data=data)


# -- verification -----------------------------------------------------------


def _cert_ok(cert: Certificate, issuer_key: bytes) -> bool:
    return verify(issuer_key, CERT_SIG_CONTEXT + cert.signed_part(), cert.signature)


def verify_quote(q: Quote | bytes, collateral: TcbCollateral) -> VerificationOutcome:
    """Run the chain / revocation / fmspc / TCB / signature checks in order.

    Enclave identity is deliberately not appraised here; callers do that
    against the policy once the quote itself is known to be genuine.
    """
    S = VerificationStatus
    if not isinstance(q, Quote):
        try:
            q = decode_quote(q)
        except (QuoteFormatError, ValueError):
            return VerificationOutcome(S.CHAIN_INVALID)
    data = collateral.data
    root, pck, att = q.chain.certs()

    # 1. chain integrity up to the collateral's root key
    if not isinstance(data, CollateralData):
        return VerificationOutcome(S.CHAIN_INVALID)
    if (root.role, pck.role, att.role) != (ROLE_ROOT, ROLE_PCK, ROLE_ATTESTATION):
        return VerificationOutcome(S.CHAIN_INVALID)
    if root.subject_key != data.root_key or not _cert_ok(root, data.root_key):
        return VerificationOutcome(S.CHAIN_INVALID)
    if not _cert_ok(pck, root.subject_key) or not _cert_ok(att, pck.subject_key):
        return VerificationOutcome(S.CHAIN_INVALID)
    try:
        r = _Reader(att.meta)
        certified = _decode_platform(r)
        r.done()
    except QuoteFormatError:
        return VerificationOutcome(S.CHAIN_INVALID)
    if pck.meta != certified.qeid:
        return VerificationOutcome(S.CHAIN_INVALID)

    # 2. revocation
    revoked = set(data.revoked)
    if any(key_id(c.subject_key) in revoked for c in (root, pck, att)):
        return VerificationOutcome(S.REVOKED)

    # 3. fmspc
    if certified.fmspc != collateral.fmspc:
        return VerificationOutcome(S.UNKNOWN_FMSPC)

    # 4. TCB level
    tcb = data.status_for(certified.tcb_svn)

    # 5. quote signature, and the signed platform block must be the certified one
    if not verify(att.subject_key, QUOTE_SIG_CONTEXT + q.signed_part(), q.signature):
        return VerificationOutcome(S.SIGNATURE_INVALID)
    if q.platform != certified:
        return VerificationOutcome(S.SIGNATURE_INVALID)

    status = S.UP_TO_DATE if tcb is TcbStatus.UP_TO_DATE else S.OUT_OF_DATE
    return VerificationOutcome(status, q.report)
