import json
import random
from dataclasses import replace
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_policy_hash
from sras.errors import DuplicateId, MissingField, ParseError, UnknownEntity, UnknownJob
from sras.policy import (
    Connection,
    Job,
    PeEntry,
    TcbStatus,
    appraise_pe_identity,
    canonical_bytes,
    dump_policy,
    job_for_rpe,
    parse_policy,
    peers_of,
    policy_from_dict,
    policy_hash,
    policy_to_dict,
    qeid_digest_hex,
    validate_policy,
)
from sras.tee import EnclaveReport

LISTING_TEXT = (Path(__file__).parent / "data" / "listing_policy.json").read_text()


@pytest.fixture
def listing():
    return parse_policy(LISTING_TEXT)


def shuffled(value, rng):
    """Same document with every object's key order permuted."""
    if isinstance(value, dict):
        keys = list(value)
        rng.shuffle(keys)
        return {k: shuffled(value[k], rng) for k in keys}
    if isinstance(value, list):
        return [shuffled(v, rng) for v in value]
    return value


def test_listing_parses_and_validates(listing):
    assert validate_policy(listing) == []
    assert listing.session_id == "uuid"
    assert [r.entity for r in listing.rpes] == ["rpe-1", "rpe-2"]
    assert listing.rpe("rpe-1").qeid_allowed == ("qeid1", "qeid2")
    assert listing.rpe("rpe-2").tcb_allowed == ("tcb-1", "tcb-2")
    assert listing.pe("pe-1") == PeEntry("pe-1", mrenclave="mrenclave")
    assert listing.pe("pe-2") == PeEntry("pe-2", mrsigner="mrsigner", isvprodid=0, isvsvn_minimum=0)
    assert listing.job("job-2").pe_qeid_allowed == ("qeid2",)
    assert listing.connections == (Connection("job-2", ("job-1",)),)
    assert all(t.data == "collateral" for t in listing.tcbs + listing.out_of_date_tcbs)


def test_listing_hash_matches_oracle(listing):
    assert policy_hash(listing).hex() == oracle_policy_hash(json.loads(LISTING_TEXT))


def test_alias_key_hashes_like_canonical_key(listing):
    doc = json.loads(LISTING_TEXT)
    doc["Out of Date TCB"] = doc.pop("Out of Data TCB")
    aliased = policy_from_dict(doc)
    assert aliased == listing
    assert policy_hash(aliased) == policy_hash(listing)
    assert oracle_policy_hash(doc) == policy_hash(listing).hex()


def test_both_spellings_rejected():
    doc = json.loads(LISTING_TEXT)
    doc["Out of Date TCB"] = doc["Out of Data TCB"]
    with pytest.raises(ParseError):
        policy_from_dict(doc)


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=0, max_value=2**32))
def test_hash_ignores_key_order(seed):
    doc = json.loads(LISTING_TEXT)
    permuted = shuffled(doc, random.Random(seed))
    assert policy_hash(parse_policy(json.dumps(permuted, indent=seed % 4))) == policy_hash(policy_from_dict(doc))


def test_round_trip_through_dump(listing):
    again = parse_policy(dump_policy(listing))
    assert again == listing
    assert canonical_bytes(again) == canonical_bytes(listing)


session_ids = st.text(min_size=1, max_size=30)


@settings(max_examples=50, deadline=None)
@given(session_ids)
def test_round_trip_any_session_id(sid):
    p = replace(parse_policy(LISTING_TEXT), session_id=sid)
    assert parse_policy(canonical_bytes(p)) == p
    assert policy_hash(p).hex() == oracle_policy_hash(policy_to_dict(p))


def test_hash_depends_on_session_id(listing):
    assert policy_hash(listing) != policy_hash(replace(listing, session_id="other"))


@pytest.mark.parametrize(
    "mutate, error",
    [
        (lambda d: d.pop("Job"), MissingField),
        (lambda d: d.update(extra=1), ParseError),
        (lambda d: d["RPE"].append(dict(d["RPE"][0])), DuplicateId),
        (lambda d: d["TCB"].append(dict(d["TCB"][0])), DuplicateId),
        (lambda d: d["PE"][0].update(mrsigner="x"), ParseError),
        (lambda d: d["PE"][0].pop("mrenclave"), ParseError),
        (lambda d: d["PE"][0].update(mrsigner_allow_any=False), ParseError),
        (lambda d: d["PE"][1].update(isvprodid=70000), ParseError),
        (lambda d: d["PE"][1].update(isvprodid=True), ParseError),
        (lambda d: d["RPE"][0].update(qeid_allowed=[1]), ParseError),
        (lambda d: d["TCB"][0].update(data=5), ParseError),
        (lambda d: d["TCB"][0].update(data={"root_key": "00", "tcb_levels": [], "revoked": []}), ParseError),
        (lambda d: d["Job"][0].update(color="red"), ParseError),
        (lambda d: d.update({"Session ID": 7}), ParseError),
    ],
)
def test_parse_errors(mutate, error):
    doc = json.loads(LISTING_TEXT)
    mutate(doc)
    with pytest.raises(error):
        policy_from_dict(doc)


@pytest.mark.parametrize("text", ["", "   ", "[]", '{"Session ID": 1.5}', b"\xff\xfe"])
def test_unparseable_documents(text):
    with pytest.raises(ParseError):
        parse_policy(text)


def test_parse_error_reports_line():
    with pytest.raises(ParseError) as exc:
        parse_policy('{\n"Session ID": "x",\n}')
    assert exc.value.line == 3


def test_unknown_status_rejected():
    doc = json.loads(LISTING_TEXT)
    doc["TCB"][0]["data"] = {"root_key": "00" * 32, "tcb_levels": [{"svn": 1, "status": "Fine"}], "revoked": []}
    with pytest.raises(ParseError):
        policy_from_dict(doc)


def test_structured_collateral_round_trip():
    doc = json.loads(LISTING_TEXT)
    doc["TCB"][0]["data"] = {
        "root_key": "ab" * 32,
        "tcb_levels": [{"svn": 3, "status": "UpToDate"}, {"svn": 2, "status": "OutOfDate"}],
        "revoked": ["cd" * 32],
    }
    p = policy_from_dict(doc)
    data = p.tcb("tcb-1").data
    assert data.status_for(3) is TcbStatus.UP_TO_DATE
    assert data.status_for(2) is TcbStatus.OUT_OF_DATE
    assert data.status_for(9) is TcbStatus.OUT_OF_DATE  # unlisted
    assert data.lists_out_of_date(2) and not data.lists_out_of_date(9)
    assert policy_to_dict(p)["TCB"][0]["data"] == doc["TCB"][0]["data"]


def test_validation_finds_each_error_kind(listing):
    p = replace(
        listing,
        session_id="",
        jobs=listing.jobs + (Job("job-3", "rpe-9", "pe-1", (), ("tcb-2",)), Job("job-1", "rpe-1", "pe-1", (), ())),
        connections=(Connection("job-2", ("job-2", "job-7")),),
    )
    kinds = {e.kind for e in validate_policy(p)}
    assert kinds == {"EmptySessionId", "DuplicateId", "UnresolvedReference", "SelfConnection"}
    refs = {str(e) for e in validate_policy(p)}
    assert any("job-3.rpe" in r for r in refs)
    assert any("job-3.out_of_tcb" in r for r in refs)  # tcb-2 is not an out-of-date entry
    assert any("clients" in r for r in refs)


def test_tcb_allowed_must_resolve(listing):
    rpes = (replace(listing.rpes[0], tcb_allowed=("tcb-9",)), listing.rpes[1])
    errors = validate_policy(replace(listing, rpes=rpes))
    assert [e.kind for e in errors] == ["UnresolvedReference"]


def test_lookups(listing):
    assert [j.id for j in job_for_rpe(listing, "rpe-2")] == ["job-2"]
    assert peers_of(listing, "job-1") == [("job-2", "server")]
    assert peers_of(listing, "job-2") == [("job-1", "client")]
    with pytest.raises(UnknownEntity):
        listing.rpe("rpe-9")
    with pytest.raises(UnknownJob):
        peers_of(listing, "job-9")


def _report(**kw):
    base = dict(mrenclave=bytes(32), mrsigner=b"\x01" * 32, isvprodid=3, isvsvn=4, report_data=bytes(64))
    base.update(kw)
    return EnclaveReport(**base)


@pytest.mark.parametrize(
    "entry, ok",
    [
        (PeEntry("p"), True),
        (PeEntry("p", mrenclave="00" * 32), True),
        (PeEntry("p", mrenclave="11" * 32), False),
        (PeEntry("p", mrsigner="01" * 32), True),
        (PeEntry("p", mrsigner="01" * 31 + "02"), False),
        (PeEntry("p", isvprodid=3), True),
        (PeEntry("p", isvprodid=2), False),
        (PeEntry("p", isvsvn_minimum=4), True),
        (PeEntry("p", isvsvn_minimum=5), False),
    ],
)
def test_pe_identity_appraisal(entry, ok):
    assert appraise_pe_identity(entry, _report()) is ok


def test_qeid_digest_form():
    assert qeid_digest_hex(b"\x00" * 16) == "374708fff7719dd5979ec875d56cd2286f6d3cf7ec317a3b25632aab28ec37bb"
