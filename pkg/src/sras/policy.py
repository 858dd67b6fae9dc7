"""Consensus policy document: model, parsing, validation, canonical hash.

The document is UTF-8 JSON with the top-level keys ``Session ID``, ``TCB``,
``Out of Data TCB``, ``RPE``, ``PE``, ``Job`` and ``Connection``.  The
spelling ``Out of Date TCB`` is accepted as an alias on input; canonical
output always uses ``Out of Data TCB``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Iterable

from . import canonical
from .crypto import Digest32, digest
from .errors import DuplicateId, MissingField, ParseError, UnknownEntity, UnknownJob

if TYPE_CHECKING:
    from .tee import EnclaveReport

KEY_SESSION = "Session ID"
KEY_TCB = "TCB"
KEY_OUT_OF_DATE = "Out of Data TCB"
KEY_OUT_OF_DATE_ALIAS = "Out of Date TCB"
KEY_RPE = "RPE"
KEY_PE = "PE"
KEY_JOB = "Job"
KEY_CONNECTION = "Connection"

TOP_LEVEL_KEYS = (KEY_SESSION, KEY_TCB, KEY_OUT_OF_DATE, KEY_RPE, KEY_PE, KEY_JOB, KEY_CONNECTION)

# (concrete key, allow-any key) per PE measurement field
PE_FIELDS = (
    ("mrenclave", "mrenclave_allow_any"),
    ("mrsigner", "mrsigner_allow_any"),
    ("isvprodid", "isvprodid_allow_any"),
    ("isvsvn_minimum", "isvsvn_allow_any"),
)


class TcbStatus(str, enum.Enum):
    UP_TO_DATE = "UpToDate"
    OUT_OF_DATE = "OutOfDate"


@dataclass(frozen=True)
class TcbLevel:
    svn: int
    status: TcbStatus


@dataclass(frozen=True)
class CollateralData:
    """Verification material for one fmspc: issuer key, TCB levels, CRL."""

    root_key: bytes
    tcb_levels: tuple[TcbLevel, ...] = ()
    revoked: tuple[str, ...] = ()

    def status_for(self, svn: int) -> TcbStatus:
        # unlisted levels are never trusted as current
        for level in self.tcb_levels:
            if level.svn == svn:
                return level.status
        return TcbStatus.OUT_OF_DATE

    def lists_out_of_date(self, svn: int) -> bool:
        return any(l.svn == svn and l.status is TcbStatus.OUT_OF_DATE for l in self.tcb_levels)


@dataclass(frozen=True)
class TcbCollateral:
    id: str
    fmspc: str
    # a bare string is an opaque placeholder (as in the reference listing);
    # it parses but can never verify a quote
    data: CollateralData | str


@dataclass(frozen=True)
class RpeEntry:
    entity: str
    qeid_allowed: tuple[str, ...]
    tcb_allowed: tuple[str, ...]


@dataclass(frozen=True)
class PeEntry:
    """PE identity; ``None`` in a field means ``<field>_allow_any: true``."""

    entity: str
    mrenclave: str | None = None
    mrsigner: str | None = None
    isvprodid: int | None = None
    isvsvn_minimum: int | None = None


@dataclass(frozen=True)
class Job:
    id: str
    rpe: str
    pe: str
    pe_qeid_allowed: tuple[str, ...]
    out_of_tcb: tuple[str, ...]


@dataclass(frozen=True)
class Connection:
    server: str
    clients: tuple[str, ...]


@dataclass(frozen=True)
class Policy:
    session_id: str
    tcbs: tuple[TcbCollateral, ...]
    out_of_date_tcbs: tuple[TcbCollateral, ...]
    rpes: tuple[RpeEntry, ...]
    pes: tuple[PeEntry, ...]
    jobs: tuple[Job, ...]
    connections: tuple[Connection, ...]

    def rpe(self, entity: str) -> RpeEntry:
        for entry in self.rpes:
            if entry.entity == entity:
                return entry
        raise UnknownEntity(entity)

    def pe(self, entity: str) -> PeEntry:
        for entry in self.pes:
            if entry.entity == entity:
                return entry
        raise UnknownEntity(entity)

    def job(self, job_id: str) -> Job:
        for job in self.jobs:
            if job.id == job_id:
                return job
        raise UnknownJob(job_id)

    def tcb(self, tcb_id: str) -> TcbCollateral:
        for tcb in self.tcbs:
            if tcb.id == tcb_id:
                return tcb
        raise UnknownEntity(tcb_id)

    def out_of_date_tcb(self, tcb_id: str) -> TcbCollateral:
        for tcb in self.out_of_date_tcbs:
            if tcb.id == tcb_id:
                return tcb
        raise UnknownEntity(tcb_id)


@dataclass(frozen=True)
class ValidationError:
    kind: str  # UnresolvedReference | SelfConnection | DuplicateId | EmptySessionId
    ref: str
    detail: str = ""

    def __str__(self) -> str:
        return f"{self.kind}({self.ref})" + (f": {self.detail}" if self.detail else "")


# -- parsing ----------------------------------------------------------------


def _expect(obj: dict, key: str, kind, path: str):
    if key not in obj:
        raise MissingField("missing field", field=f"{path}.{key}" if path else key)
    value = obj[key]
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ParseError(f"expected {getattr(kind, '__name__', kind)}", field=f"{path}.{key}")
    return value


def _str_list(obj: dict, key: str, path: str) -> tuple[str, ...]:
    items = _expect(obj, key, list, path)
    for i, item in enumerate(items):
        if not isinstance(item, str):
            raise ParseError("expected string", field=f"{path}.{key}[{i}]")
    return tuple(items)


def _check_keys(obj: dict, allowed: Iterable[str], path: str) -> None:
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ParseError(f"unknown key {extra[0]!r}", field=f"{path}.{extra[0]}")


def _objects(value: Any, path: str) -> list[dict]:
    if not isinstance(value, list):
        raise ParseError("expected list", field=path)
    for i, item in enumerate(value):
        if not isinstance(item, dict):
            raise ParseError("expected object", field=f"{path}[{i}]")
    return value


def _unique(ids: Iterable[str], path: str) -> None:
    seen = set()
    for ident in ids:
        if ident in seen:
            raise DuplicateId(f"duplicate id {ident!r}", field=path)
        seen.add(ident)


def _parse_collateral_data(value: Any, path: str) -> CollateralData | str:
    if isinstance(value, str):
        return value
    if not isinstance(value, dict):
        raise ParseError("expected string or object", field=path)
    _check_keys(value, ("root_key", "tcb_levels", "revoked"), path)
    try:
        root_key = canonical.from_hex(_expect(value, "root_key", str, path), 32)
    except ValueError as exc:
        raise ParseError(str(exc), field=f"{path}.root_key") from None
    levels = []
    for i, lv in enumerate(_objects(_expect(value, "tcb_levels", list, path), f"{path}.tcb_levels")):
        lpath = f"{path}.tcb_levels[{i}]"
        _check_keys(lv, ("svn", "status"), lpath)
        svn = _expect(lv, "svn", int, lpath)
        try:
            status = TcbStatus(_expect(lv, "status", str, lpath))
        except ValueError:
            raise ParseError("unknown TCB status", field=f"{lpath}.status") from None
        levels.append(TcbLevel(svn, status))
    revoked = _str_list(value, "revoked", path)
    return CollateralData(root_key, tuple(levels), revoked)


def _parse_tcbs(value: Any, path: str) -> tuple[TcbCollateral, ...]:
    out = []
    for i, obj in enumerate(_objects(value, path)):
        p = f"{path}[{i}]"
        _check_keys(obj, ("id", "fmspc", "data"), p)
        if "data" not in obj:
            raise MissingField("missing field", field=f"{p}.data")
        out.append(
            TcbCollateral(
                id=_expect(obj, "id", str, p),
                fmspc=_expect(obj, "fmspc", str, p),
                data=_parse_collateral_data(obj["data"], f"{p}.data"),
            )
        )
    _unique((t.id for t in out), path)
    return tuple(out)


def _parse_pe(obj: dict, p: str) -> PeEntry:
    allowed = ["entity"] + [k for pair in PE_FIELDS for k in pair]
    _check_keys(obj, allowed, p)
    values: dict[str, Any] = {}
    for concrete, allow_any in PE_FIELDS:
        has_value, has_any = concrete in obj, allow_any in obj
        if has_value == has_any:
            raise ParseError(f"exactly one of {concrete!r} / {allow_any!r} required", field=f"{p}.{concrete}")
        if has_any:
            if obj[allow_any] is not True:
                raise ParseError("allow_any flag must be true", field=f"{p}.{allow_any}")
            values[concrete] = None
        elif concrete in ("mrenclave", "mrsigner"):
            values[concrete] = _expect(obj, concrete, str, p)
        else:
            n = _expect(obj, concrete, int, p)
            if not 0 <= n <= 0xFFFF:
                raise ParseError("out of 16-bit range", field=f"{p}.{concrete}")
            values[concrete] = n
    return PeEntry(entity=_expect(obj, "entity", str, p), **values)


def policy_from_dict(doc: Any) -> Policy:
    if not isinstance(doc, dict):
        raise ParseError("policy must be a JSON object")
    if KEY_OUT_OF_DATE_ALIAS in doc:
        if KEY_OUT_OF_DATE in doc:
            raise ParseError("both spellings of the out-of-date key present", field=KEY_OUT_OF_DATE_ALIAS)
        doc = {(KEY_OUT_OF_DATE if k == KEY_OUT_OF_DATE_ALIAS else k): v for k, v in doc.items()}
    _check_keys(doc, TOP_LEVEL_KEYS, "")
    for key in TOP_LEVEL_KEYS:
        if key not in doc:
            raise MissingField("missing field", field=key)

    session_id = doc[KEY_SESSION]
    if not isinstance(session_id, str):
        raise ParseError("expected string", field=KEY_SESSION)

    rpes = []
    for i, obj in enumerate(_objects(doc[KEY_RPE], KEY_RPE)):
        p = f"{KEY_RPE}[{i}]"
        _check_keys(obj, ("entity", "qeid_allowed", "tcb_allowed"), p)
        rpes.append(
            RpeEntry(
                entity=_expect(obj, "entity", str, p),
                qeid_allowed=_str_list(obj, "qeid_allowed", p),
                tcb_allowed=_str_list(obj, "tcb_allowed", p),
            )
        )
    _unique((r.entity for r in rpes), KEY_RPE)

    pes = [_parse_pe(obj, f"{KEY_PE}[{i}]") for i, obj in enumerate(_objects(doc[KEY_PE], KEY_PE))]
    _unique((e.entity for e in pes), KEY_PE)

    jobs = []
    for i, obj in enumerate(_objects(doc[KEY_JOB], KEY_JOB)):
        p = f"{KEY_JOB}[{i}]"
        _check_keys(obj, ("id", "rpe", "pe", "pe_qeid_allowed", "out_of_tcb"), p)
        jobs.append(
            Job(
                id=_expect(obj, "id", str, p),
                rpe=_expect(obj, "rpe", str, p),
                pe=_expect(obj, "pe", str, p),
                pe_qeid_allowed=_str_list(obj, "pe_qeid_allowed", p),
                out_of_tcb=_str_list(obj, "out_of_tcb", p),
            )
        )
    _unique((j.id for j in jobs), KEY_JOB)

    connections = []
    for i, obj in enumerate(_objects(doc[KEY_CONNECTION], KEY_CONNECTION)):
        p = f"{KEY_CONNECTION}[{i}]"
        _check_keys(obj, ("server", "clients"), p)
        connections.append(Connection(_expect(obj, "server", str, p), _str_list(obj, "clients", p)))

    return Policy(
        session_id=session_id,
        tcbs=_parse_tcbs(doc[KEY_TCB], KEY_TCB),
        out_of_date_tcbs=_parse_tcbs(doc[KEY_OUT_OF_DATE], KEY_OUT_OF_DATE),
        rpes=tuple(rpes),
        pes=tuple(pes),
        jobs=tuple(jobs),
        connections=tuple(connections),
    )


def parse_policy(text: str | bytes) -> Policy:
    """Parse policy text.  Raises ParseError (or MissingField / DuplicateId)."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"not UTF-8: {exc}") from None
    if not text.strip():
        raise ParseError("empty policy document", line=1)
    try:
        doc = canonical.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from None
    except ValueError as exc:
        raise ParseError(str(exc)) from None
    return policy_from_dict(doc)


# -- serialization ----------------------------------------------------------


def _collateral_to_json(data: CollateralData | str) -> Any:
    if isinstance(data, str):
        return data
    return {
        "root_key": data.root_key.hex(),
        "tcb_levels": [{"svn": l.svn, "status": l.status.value} for l in data.tcb_levels],
        "revoked": list(data.revoked),
    }


def _pe_to_json(entry: PeEntry) -> dict:
    out: dict[str, Any] = {"entity": entry.entity}
    for concrete, allow_any in PE_FIELDS:
        value = getattr(entry, concrete)
        if value is None:
            out[allow_any] = True
        else:
            out[concrete] = value
    return out


def policy_to_dict(p: Policy) -> dict:
    tcbs = lambda items: [{"id": t.id, "fmspc": t.fmspc, "data": _collateral_to_json(t.data)} for t in items]
    return {
        KEY_SESSION: p.session_id,
        KEY_TCB: tcbs(p.tcbs),
        KEY_OUT_OF_DATE: tcbs(p.out_of_date_tcbs),
        KEY_RPE: [
            {"entity": r.entity, "qeid_allowed": list(r.qeid_allowed), "tcb_allowed": list(r.tcb_allowed)}
            for r in p.rpes
        ],
        KEY_PE: [_pe_to_json(e) for e in p.pes],
        KEY_JOB: [
            {
                "id": j.id,
                "rpe": j.rpe,
                "pe": j.pe,
                "pe_qeid_allowed": list(j.pe_qeid_allowed),
                "out_of_tcb": list(j.out_of_tcb),
            }
            for j in p.jobs
        ],
        KEY_CONNECTION: [{"server": c.server, "clients": list(c.clients)} for c in p.connections],
    }


def canonical_bytes(p: Policy) -> bytes:
    return canonical.dumps(policy_to_dict(p))


def policy_hash(p: Policy) -> Digest32:
    return digest(canonical_bytes(p))


def dump_policy(p: Policy, indent: int = 2) -> str:
    """Human-readable form; hashes identically to the canonical form."""
    return json.dumps(policy_to_dict(p), indent=indent)


# -- validation -------------------------------------------------------------


def validate_policy(p: Policy) -> list[ValidationError]:
    errors: list[ValidationError] = []
    if not p.session_id:
        errors.append(ValidationError("EmptySessionId", KEY_SESSION))

    def dupes(ids, where):
        seen = set()
        for ident in ids:
            if ident in seen:
                errors.append(ValidationError("DuplicateId", f"{where}.{ident}"))
            seen.add(ident)

    dupes((t.id for t in p.tcbs), KEY_TCB)
    dupes((t.id for t in p.out_of_date_tcbs), KEY_OUT_OF_DATE)
    dupes((r.entity for r in p.rpes), KEY_RPE)
    dupes((e.entity for e in p.pes), KEY_PE)
    dupes((j.id for j in p.jobs), KEY_JOB)

    tcb_ids = {t.id for t in p.tcbs}
    ood_ids = {t.id for t in p.out_of_date_tcbs}
    rpe_ids = {r.entity for r in p.rpes}
    pe_ids = {e.entity for e in p.pes}
    job_ids = {j.id for j in p.jobs}

    for r in p.rpes:
        for t in r.tcb_allowed:
            if t not in tcb_ids:
                errors.append(ValidationError("UnresolvedReference", f"{r.entity}.tcb_allowed", t))
    for j in p.jobs:
        if j.rpe not in rpe_ids:
            errors.append(ValidationError("UnresolvedReference", f"{j.id}.rpe", j.rpe))
        if j.pe not in pe_ids:
            errors.append(ValidationError("UnresolvedReference", f"{j.id}.pe", j.pe))
        for t in j.out_of_tcb:
            if t not in ood_ids:
                errors.append(ValidationError("UnresolvedReference", f"{j.id}.out_of_tcb", t))
    for i, c in enumerate(p.connections):
        ref = f"{KEY_CONNECTION}[{i}]"
        if c.server not in job_ids:
            errors.append(ValidationError("UnresolvedReference", f"{ref}.server", c.server))
        for client in c.clients:
            if client not in job_ids:
                errors.append(ValidationError("UnresolvedReference", f"{ref}.clients", client))
        if c.server in c.clients:
            errors.append(ValidationError("SelfConnection", ref, c.server))
    return errors


# -- queries ----------------------------------------------------------------


def job_for_rpe(p: Policy, rpe_entity: str) -> list[Job]:
    p.rpe(rpe_entity)
    return [j for j in p.jobs if j.rpe == rpe_entity]


def peers_of(p: Policy, job_id: str) -> list[tuple[str, str]]:
    """(peer job id, peer role) pairs; the role is what the *peer* plays."""
    p.job(job_id)
    out: list[tuple[str, str]] = []
    for c in p.connections:
        if c.server == job_id:
            out.extend((client, "client") for client in c.clients)
        elif job_id in c.clients:
            out.append((c.server, "server"))
    seen, unique = set(), []
    for item in out:
        if item not in seen:
            seen.add(item)
            unique.append(item)
    return unique


def appraise_pe_identity(entry: PeEntry, report: EnclaveReport) -> bool:
    if entry.mrenclave is not None and entry.mrenclave.lower() != report.mrenclave.hex():
        return False
    if entry.mrsigner is not None and entry.mrsigner.lower() != report.mrsigner.hex():
        return False
    if entry.isvprodid is not None and entry.isvprodid != report.isvprodid:
        return False
    if entry.isvsvn_minimum is not None and report.isvsvn < entry.isvsvn_minimum:
        return False
    return True


def qeid_digest_hex(qeid: bytes) -> str:
    """Form in which a platform qeid is allow-listed in a policy."""
    return digest(qeid).hex()
