"""Signed records exchanged between parties, and verdict types.

All records travel as canonical JSON (see ``sras.canonical``) with binary
fields hex-encoded.  Decoding is strict: unknown or missing keys, non-hex
bytes and wrong lengths all raise ``MalformedRecord``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any

from . import canonical
from .crypto import PUBLIC_KEY_SIZE, SIGNATURE_SIZE, SUITE_ID, Digest32, digest
from .errors import QuoteFormatError, SrasError
from .tee import Quote, decode_quote

PE_RESULT_CONTEXT = b"SRAS-PE-RESULT\x00"
NONCE_SIZE = 32


class MalformedRecord(SrasError, ValueError):
    pass


class Reason(str, enum.Enum):
    POLICY_MISMATCH = "PolicyMismatch"
    IDENTIFIER_MISMATCH = "IdentifierMismatch"
    QEID_NOT_ALLOWED = "QeidNotAllowed"
    QUOTE_INVALID = "QuoteInvalid"
    MEASUREMENT_MISMATCH = "MeasurementMismatch"
    UNKNOWN_ENTITY = "UnknownEntity"
    BAD_SIGNATURE = "BadSignature"
    PEER_VERDICT_FAIL = "PeerVerdictFail"
    SESSION_MISMATCH = "SessionMismatch"
    UNKNOWN_ISSUER = "UnknownIssuer"
    NO_SUCH_PEER = "NoSuchPeer"
    PEER_NOT_VERIFIED = "PeerNotVerified"
    KEY_BINDING_MISMATCH = "KeyBindingMismatch"
    IDENTITY_MISMATCH = "IdentityMismatch"
    TCB_OUT_OF_DATE = "TcbOutOfDate"
    MALFORMED = "Malformed"
    SUITE_MISMATCH = "SuiteMismatch"


@dataclass(frozen=True)
class Verdict:
    reason: Reason | None = None
    detail: str = ""

    @property
    def accepted(self) -> bool:
        return self.reason is None

    def __bool__(self) -> bool:
        return self.accepted

    def __str__(self) -> str:
        if self.accepted:
            return "Accept"
        return f"Reject({self.reason.value}{': ' + self.detail if self.detail else ''})"


ACCEPT = Verdict()


def reject(reason: Reason, detail: str = "") -> Verdict:
    return Verdict(reason, detail)


# -- helpers ----------------------------------------------------------------


def _fields(obj: Any, keys: tuple[str, ...]) -> dict:
    if not isinstance(obj, dict):
        raise MalformedRecord("expected object")
    if set(obj) != set(keys):
        raise MalformedRecord(f"keys {sorted(obj)} != {sorted(keys)}")
    return obj


def _str(value: Any, name: str) -> str:
    if not isinstance(value, str):
        raise MalformedRecord(f"{name} must be a string")
    return value


def _hex(value: Any, name: str, size: int | None = None) -> bytes:
    try:
        return canonical.from_hex(value, size)
    except ValueError as exc:
        raise MalformedRecord(f"{name}: {exc}") from None


def _load(payload: bytes) -> Any:
    try:
        return canonical.loads(payload)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedRecord(f"not canonical JSON: {exc}") from None


def _check_canonical(payload: bytes, encoded: bytes) -> None:
    # a payload that decodes but is not byte-identical to its re-encoding
    # carries bytes no signature covers
    if bytes(payload) != encoded:
        raise MalformedRecord("payload is not in canonical form")


def announce_message(session_id: str, entity: str) -> bytes:
    return canonical.dumps({"msg": "announce", "session_id": session_id, "entity": entity})


def yes_message(session_id: str, entity: str) -> bytes:
    return canonical.dumps({"msg": "yes", "session_id": session_id, "entity": entity})


# -- announcement -----------------------------------------------------------


@dataclass(frozen=True)
class Announcement:
    entity: str
    identifier: bytes
    session_id: str
    signature: bytes
    suite: str = SUITE_ID

    def to_payload(self) -> bytes:
        return canonical.dumps(
            {
                "entity": self.entity,
                "identifier": self.identifier.hex(),
                "session_id": self.session_id,
                "signature": self.signature.hex(),
                "suite": self.suite,
            }
        )

    @classmethod
    def from_payload(cls, payload: bytes) -> Announcement:
        obj = _fields(_load(payload), ("entity", "identifier", "session_id", "signature", "suite"))
        out = cls(
            _str(obj["entity"], "entity"),
            _hex(obj["identifier"], "identifier", PUBLIC_KEY_SIZE),
            _str(obj["session_id"], "session_id"),
            _hex(obj["signature"], "signature", SIGNATURE_SIZE),
            _str(obj["suite"], "suite"),
        )
        _check_canonical(payload, out.to_payload())
        return out


# -- RPE evidence -----------------------------------------------------------


@dataclass(frozen=True)
class RpeEvidence:
    """Entity, identifier (signing public key), quote, consensus result.

    ``consensus_yes`` is ``None`` while the result is "no", otherwise the
    RPE's signature over ``yes_message(session_id, entity)``.
    """

    entity: str
    identifier: bytes
    quote: Quote
    consensus_yes: bytes | None = None
    suite: str = SUITE_ID

    @property
    def policy_binding(self) -> bytes:
        return self.quote.report.report_data[32:64]

    @property
    def identifier_binding(self) -> bytes:
        return self.quote.report.report_data[0:32]

    def to_payload(self) -> bytes:
        result: Any = "no" if self.consensus_yes is None else {"yes": self.consensus_yes.hex()}
        return canonical.dumps(
            {
                "consensus_ra_result": result,
                "entity": self.entity,
                "identifier": self.identifier.hex(),
                "quote": self.quote.to_bytes().hex(),
                "suite": self.suite,
            }
        )

    @classmethod
    def from_payload(cls, payload: bytes) -> RpeEvidence:
        obj = _fields(_load(payload), ("consensus_ra_result", "entity", "identifier", "quote", "suite"))
        result = obj["consensus_ra_result"]
        if result == "no":
            yes = None
        else:
            yes = _hex(_fields(result, ("yes",))["yes"], "consensus_ra_result.yes", SIGNATURE_SIZE)
        try:
            quote = decode_quote(_hex(obj["quote"], "quote"))
        except (QuoteFormatError, ValueError) as exc:
            raise MalformedRecord(f"quote: {exc}") from None
        out = cls(
            _str(obj["entity"], "entity"),
            _hex(obj["identifier"], "identifier", PUBLIC_KEY_SIZE),
            quote,
            yes,
            _str(obj["suite"], "suite"),
        )
        _check_canonical(payload, out.to_payload())
        return out


# -- PE evidence ------------------------------------------------------------


@dataclass(frozen=True)
class PeResult:
    verdict: str  # "pass" | "fail"
    reason: str  # empty on pass
    pe: str
    job: str
    issuer: str
    pe_public_key: bytes
    session_id: str

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_json(self) -> dict:
        return {
            "issuer": self.issuer,
            "job": self.job,
            "pe": self.pe,
            "pe_public_key": self.pe_public_key.hex(),
            "reason": self.reason,
            "session_id": self.session_id,
            "verdict": self.verdict,
        }

    def signing_bytes(self) -> bytes:
        return PE_RESULT_CONTEXT + canonical.dumps(self.to_json())

    @classmethod
    def from_json(cls, obj: Any) -> PeResult:
        obj = _fields(obj, ("issuer", "job", "pe", "pe_public_key", "reason", "session_id", "verdict"))
        verdict = _str(obj["verdict"], "verdict")
        if verdict not in ("pass", "fail"):
            raise MalformedRecord("verdict must be pass or fail")
        return cls(
            verdict=verdict,
            reason=_str(obj["reason"], "reason"),
            pe=_str(obj["pe"], "pe"),
            job=_str(obj["job"], "job"),
            issuer=_str(obj["issuer"], "issuer"),
            pe_public_key=_hex(obj["pe_public_key"], "pe_public_key", PUBLIC_KEY_SIZE),
            session_id=_str(obj["session_id"], "session_id"),
        )


@dataclass(frozen=True)
class PeEvidence:
    entity: str
    result: PeResult
    signature: bytes
    suite: str = SUITE_ID

    def to_payload(self) -> bytes:
        return canonical.dumps(
            {
                "entity": self.entity,
                "result": self.result.to_json(),
                "signature": self.signature.hex(),
                "suite": self.suite,
            }
        )

    @classmethod
    def from_payload(cls, payload: bytes) -> PeEvidence:
        obj = _fields(_load(payload), ("entity", "result", "signature", "suite"))
        out = cls(
            _str(obj["entity"], "entity"),
            PeResult.from_json(obj["result"]),
            _hex(obj["signature"], "signature", SIGNATURE_SIZE),
            _str(obj["suite"], "suite"),
        )
        _check_canonical(payload, out.to_payload())
        return out


# -- PE certificate ---------------------------------------------------------


def certificate_digest(pe_public_key: bytes, session_id: str, nonce: bytes) -> Digest32:
    return digest(bytes(pe_public_key) + session_id.encode("utf-8") + bytes(nonce))


@dataclass(frozen=True)
class PeCertificate:
    pe_public_key: bytes
    session_id: str
    nonce: bytes
    rpe_report: bytes  # RPE signature over certificate_digest(...)
    suite: str = SUITE_ID

    @property
    def report_digest(self) -> Digest32:
        return certificate_digest(self.pe_public_key, self.session_id, self.nonce)

    def to_bytes(self) -> bytes:
        return canonical.dumps(
            {
                "nonce": self.nonce.hex(),
                "pe_public_key": self.pe_public_key.hex(),
                "rpe_report": self.rpe_report.hex(),
                "session_id": self.session_id,
                "suite": self.suite,
            }
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> PeCertificate:
        obj = _fields(_load(data), ("nonce", "pe_public_key", "rpe_report", "session_id", "suite"))
        out = cls(
            _hex(obj["pe_public_key"], "pe_public_key", PUBLIC_KEY_SIZE),
            _str(obj["session_id"], "session_id"),
            _hex(obj["nonce"], "nonce", NONCE_SIZE),
            _hex(obj["rpe_report"], "rpe_report", SIGNATURE_SIZE),
            _str(obj["suite"], "suite"),
        )
        _check_canonical(data, out.to_bytes())
        return out
