"""Relying Party Enclave: the per-party verifier and its phase machine.

Phases advance strictly Created -> Registered -> MutuallyAttested ->
LocallyVerified -> Ready.  Rejections are sticky: once a peer's evidence
has been rejected the RPE never records that peer, so the phase gate that
depends on it can no longer open.

This class holds logic and state only.  Waiting on the board and timing
are the caller's business (see ``sras.harness``), which keeps every
operation here synchronous and directly testable.
"""

from __future__ import annotations

import enum
import logging
import os
from typing import Callable

from .crypto import (
    SUITE_ID,
    EphemeralKey,
    SigningKeyPair,
    digest,
    generate_ephemeral,
    generate_keypair,
    hkdf,
    open_sealed,
    verify,
)
from .errors import (
    DecryptFailure,
    InvalidPolicy,
    ParseError,
    PeerNotVerified,
    PhaseError,
    QuotingFailure,
    UnknownEntity,
    UnknownJob,
)
from .evidence import (
    ACCEPT,
    Announcement,
    MalformedRecord,
    PeCertificate,
    PeEvidence,
    PeResult,
    Reason,
    RpeEvidence,
    Verdict,
    announce_message,
    certificate_digest,
    reject,
    yes_message,
)
from .policy import (
    CollateralData,
    Job,
    Policy,
    TcbCollateral,
    appraise_pe_identity,
    job_for_rpe,
    parse_policy,
    peers_of,
    policy_hash,
    validate_policy,
)
from .tee import EnclaveIdentity, Platform, Quote, VerificationStatus, verify_quote
from .vnet import BoardClient, BoardRecord, RecordKind

logger = logging.getLogger(__name__)

# Every RPE runs the same open-source build, so one measurement identifies it.
RPE_IDENTITY = EnclaveIdentity(
    mrenclave=digest(b"sras relying party enclave build 1"),
    mrsigner=digest(b"sras relying party enclave signer"),
    isvprodid=1,
    isvsvn=1,
)

POLICY_CHANNEL_LABEL = "rpo-rpe policy"


class RpePhase(enum.IntEnum):
    CREATED = 0
    REGISTERED = 1
    MUTUALLY_ATTESTED = 2
    LOCALLY_VERIFIED = 3
    READY = 4


def resolve_collateral(candidates: list[TcbCollateral], fmspc: str) -> TcbCollateral | None:
    for tcb in candidates:
        if tcb.fmspc == fmspc:
            return tcb
    return None


class RelyingPartyEnclave:
    def __init__(
        self,
        entity: str,
        platform: Platform,
        board: BoardClient,
        *,
        identity: EnclaveIdentity = RPE_IDENTITY,
        key_seed: bytes | None = None,
        rng: Callable[[int], bytes] = os.urandom,
    ):
        self.entity = entity
        self.platform = platform
        self.board = board
        self.identity = identity
        self._key_seed = key_seed
        self._rng = rng

        self.phase = RpePhase.CREATED
        self.phase_history = [RpePhase.CREATED]
        self.policy: Policy | None = None
        self._policy_hash: bytes | None = None
        self._keypair: SigningKeyPair | None = None
        self._channel: EphemeralKey | None = None
        self._registration_report_data: bytes | None = None

        self.peer_identifiers: dict[str, bytes] = {}
        self.rpe_verdicts: dict[str, Verdict] = {}
        self.consensus_confirmed: set[str] = set()
        self.own_evidence: RpeEvidence | None = None

        self.local_evidence: dict[str, PeEvidence] = {}
        self.pe_verdicts: dict[str, Verdict] = {}
        self.peer_pe_keys: dict[str, bytes] = {}
        self.certificates: dict[str, PeCertificate] = {}
        self._delivered: set[str] = set()

        self.failure: Verdict | None = None

    # -- helpers --------------------------------------------------------------

    def _advance(self, phase: RpePhase) -> None:
        if phase != self.phase + 1:
            raise PhaseError(f"{self.entity}: cannot move from {self.phase.name} to {phase.name}")
        self.phase = phase
        self.phase_history.append(phase)
        logger.debug("%s -> %s", self.entity, phase.name)

    def _require(self, *phases: RpePhase) -> None:
        if self.phase not in phases:
            names = "/".join(p.name for p in phases)
            raise PhaseError(f"{self.entity}: requires phase {names}, is {self.phase.name}")

    def _fail(self, verdict: Verdict) -> Verdict:
        if not verdict.accepted and self.failure is None:
            self.failure = verdict
        return verdict

    @property
    def identifier(self) -> bytes:
        if self._keypair is None:
            raise PhaseError(f"{self.entity}: no signing key before registration")
        return self._keypair.public

    @property
    def session_id(self) -> str:
        if self.policy is None:
            raise PhaseError(f"{self.entity}: no policy")
        return self.policy.session_id

    @property
    def own_jobs(self) -> list[Job]:
        return job_for_rpe(self.policy, self.entity)

    def other_rpes(self) -> list[str]:
        return [r.entity for r in self.policy.rpes if r.entity != self.entity]

    def _key_for(self, entity: str) -> bytes | None:
        if entity == self.entity:
            return self.identifier
        return self.peer_identifiers.get(entity)

    # -- registration ---------------------------------------------------------

    def registration_quote(self) -> Quote:
        """Quote for the local RPO; report_data commits to a fresh channel key."""
        self._require(RpePhase.CREATED)
        self._channel = generate_ephemeral()
        self._registration_report_data = digest(self._channel.public) + bytes(32)
        try:
            return self.platform.quote(self.identity, self._registration_report_data)
        except Exception as exc:
            raise QuotingFailure(str(exc)) from exc

    @property
    def channel_public(self) -> bytes:
        if self._channel is None:
            raise PhaseError(f"{self.entity}: no channel key; call registration_quote first")
        return self._channel.public

    def receive_policy(self, envelope: bytes) -> None:
        """Decrypt the RPO's policy envelope and register with it."""
        self._require(RpePhase.CREATED)
        if self._channel is None or len(envelope) < 32:
            raise DecryptFailure("no channel")
        shared = self._channel.exchange(envelope[:32])
        key = hkdf(shared, self._registration_report_data, POLICY_CHANNEL_LABEL)
        plaintext = open_sealed(key, bytes(12), envelope[32:], self.entity.encode("utf-8"))
        try:
            policy = parse_policy(plaintext)
        except ParseError as exc:
            raise InvalidPolicy([exc]) from exc
        self.on_policy_received(policy)

    def on_policy_received(self, policy: Policy) -> Announcement:
        self._require(RpePhase.CREATED)
        errors = validate_policy(policy)
        if errors:
            raise InvalidPolicy(errors)
        try:
            policy.rpe(self.entity)
        except UnknownEntity:
            raise InvalidPolicy([f"{self.entity} not listed in policy"]) from None
        self.policy = policy
        self._policy_hash = policy_hash(policy)
        seed = None
        if self._key_seed is not None:
            seed = digest(self._key_seed + b"\x00" + policy.session_id.encode("utf-8"))
        self._keypair = generate_keypair(seed)
        signature = self._keypair.sign(announce_message(policy.session_id, self.entity))
        ann = Announcement(self.entity, self._keypair.public, policy.session_id, signature)
        self.board.publish(self.entity, RecordKind.ANNOUNCEMENT, ann.to_payload())
        self._advance(RpePhase.REGISTERED)
        return ann

    # -- mutual attestation ---------------------------------------------------

    def generate_rpe_evidence(self) -> RpeEvidence:
        self._require(RpePhase.REGISTERED)
        report_data = digest(self.identifier) + self._policy_hash
        try:
            quote = self.platform.quote(self.identity, report_data)
        except Exception as exc:
            raise QuotingFailure(str(exc)) from exc
        ev = RpeEvidence(self.entity, self.identifier, quote)
        self.own_evidence = ev
        self.board.publish(self.entity, RecordKind.RPE_EVIDENCE, ev.to_payload())
        return ev

    def _check_rpe_evidence(self, ev: RpeEvidence) -> Verdict:
        if ev.suite != SUITE_ID:
            return reject(Reason.SUITE_MISMATCH, ev.suite)
        if ev.entity == self.entity:
            return reject(Reason.UNKNOWN_ENTITY, f"{ev.entity} is this RPE")
        try:
            entry = self.policy.rpe(ev.entity)
        except UnknownEntity:
            return reject(Reason.UNKNOWN_ENTITY, ev.entity)

        # (1) same policy; checked first so a forged policy is always named as such
        if ev.policy_binding != self._policy_hash:
            return reject(Reason.POLICY_MISMATCH)
        # genuine quote from an allowed TCB, running the common RPE build
        allowed = [self.policy.tcb(t) for t in entry.tcb_allowed]
        collateral = resolve_collateral(allowed, ev.quote.platform.fmspc)
        if collateral is None:
            return reject(Reason.QUOTE_INVALID, VerificationStatus.UNKNOWN_FMSPC.value)
        outcome = verify_quote(ev.quote, collateral)
        if outcome.status is not VerificationStatus.UP_TO_DATE:
            return reject(Reason.QUOTE_INVALID, outcome.status.value)
        if outcome.report.mrenclave != self.identity.mrenclave:
            return reject(Reason.MEASUREMENT_MISMATCH, outcome.report.mrenclave.hex())

        # (2) identifier bound into the quote
        if ev.identifier_binding != digest(ev.identifier):
            return reject(Reason.IDENTIFIER_MISMATCH)
        # (3) allowed platform
        if digest(ev.quote.platform.qeid).hex() not in entry.qeid_allowed:
            return reject(Reason.QEID_NOT_ALLOWED, digest(ev.quote.platform.qeid).hex())

        recorded = self.peer_identifiers.get(ev.entity)
        if recorded is not None and recorded != ev.identifier:
            return reject(Reason.IDENTIFIER_MISMATCH, "identifier changed after recording")
        if ev.consensus_yes is not None and not verify(
            ev.identifier, yes_message(self.session_id, ev.entity), ev.consensus_yes
        ):
            return reject(Reason.BAD_SIGNATURE, "consensus result")
        return ACCEPT

    def verify_peer_rpe_evidence(self, ev: RpeEvidence) -> Verdict:
        self._require(RpePhase.REGISTERED)
        verdict = self._check_rpe_evidence(ev)
        previous = self.rpe_verdicts.get(ev.entity)
        if previous is not None and not previous.accepted:
            return verdict  # sticky: a rejected peer is never recorded
        self.rpe_verdicts[ev.entity] = verdict
        if verdict.accepted:
            self.peer_identifiers[ev.entity] = ev.identifier
        else:
            self._fail(verdict)
        return verdict

    def consume_rpe_evidence(self, record: BoardRecord) -> Verdict:
        try:
            ev = RpeEvidence.from_payload(record.payload)
        except MalformedRecord as exc:
            return self._fail(self._note_rpe(record.entity, reject(Reason.MALFORMED, str(exc))))
        if ev.entity != record.entity:
            return self._fail(self._note_rpe(record.entity, reject(Reason.MALFORMED, "entity mismatch")))
        return self.verify_peer_rpe_evidence(ev)

    def _note_rpe(self, entity: str, verdict: Verdict) -> Verdict:
        if entity in {r.entity for r in self.policy.rpes}:
            self.rpe_verdicts.setdefault(entity, verdict)
        return verdict

    def verify_peer_announcement(self, record: BoardRecord) -> Verdict:
        """Check a peer's announcement against its recorded identifier.

        Only meaningful after the peer's evidence has been accepted; a bad
        announcement revokes the recording.
        """
        recorded = self.peer_identifiers.get(record.entity)
        if recorded is None:
            return reject(Reason.UNKNOWN_ENTITY, record.entity)
        try:
            ann = Announcement.from_payload(record.payload)
        except MalformedRecord as exc:
            verdict = reject(Reason.BAD_SIGNATURE, f"undecodable announcement: {exc}")
        else:
            if ann.entity != record.entity or ann.identifier != recorded:
                verdict = reject(Reason.BAD_SIGNATURE, "announcement names another key")
            elif ann.session_id != self.session_id:
                verdict = reject(Reason.SESSION_MISMATCH, ann.session_id)
            elif not verify(recorded, announce_message(ann.session_id, ann.entity), ann.signature):
                verdict = reject(Reason.BAD_SIGNATURE, "announcement")
            else:
                return ACCEPT
        self.peer_identifiers.pop(record.entity, None)
        self.rpe_verdicts[record.entity] = verdict
        return self._fail(verdict)

    def pending_peers(self) -> list[str]:
        return [e for e in self.other_rpes() if e not in self.peer_identifiers]

    def complete_mutual_attestation(self) -> RpeEvidence:
        self._require(RpePhase.REGISTERED)
        rejected = [e for e, v in self.rpe_verdicts.items() if not v.accepted]
        if rejected:
            raise PhaseError(f"{self.entity}: rejected peers {rejected}")
        if self.pending_peers():
            raise PhaseError(f"{self.entity}: pending peers {self.pending_peers()}")
        if self.own_evidence is None:
            raise PhaseError(f"{self.entity}: own evidence not yet published")
        yes = self._keypair.sign(yes_message(self.session_id, self.entity))
        ev = RpeEvidence(self.entity, self.identifier, self.own_evidence.quote, yes)
        self.own_evidence = ev
        self.board.publish(self.entity, RecordKind.RPE_EVIDENCE, ev.to_payload())
        self._advance(RpePhase.MUTUALLY_ATTESTED)
        return ev

    def verify_peer_consensus(self, record: BoardRecord) -> Verdict:
        """Accept a peer's "yes" once it is signed by the recorded identifier."""
        try:
            ev = RpeEvidence.from_payload(record.payload)
        except MalformedRecord as exc:
            return self._fail(reject(Reason.MALFORMED, str(exc)))
        recorded = self.peer_identifiers.get(record.entity)
        if recorded is None:
            return self._fail(reject(Reason.UNKNOWN_ENTITY, record.entity))
        if ev.entity != record.entity or ev.identifier != recorded:
            return self._fail(reject(Reason.IDENTIFIER_MISMATCH, record.entity))
        if ev.consensus_yes is None:
            return reject(Reason.PEER_NOT_VERIFIED, "consensus result still no")
        if not verify(recorded, yes_message(self.session_id, ev.entity), ev.consensus_yes):
            return self._fail(reject(Reason.BAD_SIGNATURE, "consensus result"))
        self.consensus_confirmed.add(record.entity)
        return ACCEPT

    # -- local verification ---------------------------------------------------

    def _own_job(self, job_id: str | None) -> Job:
        jobs = self.own_jobs
        if job_id is None:
            if len(jobs) != 1:
                raise UnknownJob(f"{self.entity} owns {len(jobs)} jobs; job id required")
            return jobs[0]
        for job in jobs:
            if job.id == job_id:
                return job
        raise UnknownJob(job_id)

    def _check_local_pe(self, job: Job, quote: Quote, pe_public_key: bytes) -> Verdict:
        # (a) key bound into the quote
        if quote.report.report_data[:32] != digest(pe_public_key):
            return reject(Reason.KEY_BINDING_MISMATCH)
        # (b) genuine quote; an out-of-date level is judged by (e) instead
        collateral = resolve_collateral(list(self.policy.tcbs), quote.platform.fmspc) or resolve_collateral(
            list(self.policy.out_of_date_tcbs), quote.platform.fmspc
        )
        if collateral is None:
            return reject(Reason.QUOTE_INVALID, VerificationStatus.UNKNOWN_FMSPC.value)
        outcome = verify_quote(quote, collateral)
        if not outcome.verified:
            return reject(Reason.QUOTE_INVALID, outcome.status.value)
        # (c) identity per policy
        if not appraise_pe_identity(self.policy.pe(job.pe), outcome.report):
            return reject(Reason.IDENTITY_MISMATCH, job.pe)
        # (d) allowed platform
        qeid_hex = digest(quote.platform.qeid).hex()
        if qeid_hex not in job.pe_qeid_allowed:
            return reject(Reason.QEID_NOT_ALLOWED, qeid_hex)
        # (e) not on a TCB the parties declared vulnerable
        for tcb_id in job.out_of_tcb:
            stale = self.policy.out_of_date_tcb(tcb_id)
            if stale.fmspc != quote.platform.fmspc:
                continue
            if not isinstance(stale.data, CollateralData) or stale.data.lists_out_of_date(quote.platform.tcb_svn):
                return reject(Reason.TCB_OUT_OF_DATE, tcb_id)
        return ACCEPT

    def peers_confirmed(self) -> bool:
        return all(e in self.consensus_confirmed for e in self.other_rpes())

    def verify_local_pe(self, pe_quote: Quote, pe_public_key: bytes, job_id: str | None = None) -> PeEvidence:
        self._require(RpePhase.MUTUALLY_ATTESTED)
        if not self.peers_confirmed():
            missing = [e for e in self.other_rpes() if e not in self.consensus_confirmed]
            raise PhaseError(f"{self.entity}: consensus results pending from {missing}")
        job = self._own_job(job_id)
        verdict = self._check_local_pe(job, pe_quote, bytes(pe_public_key))
        result = PeResult(
            verdict="pass" if verdict.accepted else "fail",
            reason="" if verdict.accepted else verdict.reason.value,
            pe=job.pe,
            job=job.id,
            issuer=self.entity,
            pe_public_key=bytes(pe_public_key),
            session_id=self.session_id,
        )
        ev = PeEvidence(job.pe, result, self._keypair.sign(result.signing_bytes()))
        self.local_evidence[job.id] = ev
        self.board.publish(job.pe, RecordKind.PE_EVIDENCE, ev.to_payload())
        if not verdict.accepted:
            self._fail(verdict)
        return ev

    def local_verdict(self, job_id: str | None = None) -> Verdict:
        ev = self.local_evidence.get(self._own_job(job_id).id)
        if ev is None:
            return reject(Reason.PEER_NOT_VERIFIED, "local PE not verified")
        if ev.result.passed:
            return ACCEPT
        return reject(Reason(ev.result.reason))

    def peer_jobs(self) -> list[str]:
        out: list[str] = []
        for job in self.own_jobs:
            for peer, _role in peers_of(self.policy, job.id):
                if peer not in out:
                    out.append(peer)
        return out

    def verify_peer_pe_evidence(self, ev: PeEvidence, issuer_entity: str) -> Verdict:
        key = self._key_for(issuer_entity)
        if key is None:
            return reject(Reason.UNKNOWN_ISSUER, issuer_entity)
        if ev.suite != SUITE_ID:
            return reject(Reason.SUITE_MISMATCH, ev.suite)
        if not verify(key, ev.result.signing_bytes(), ev.signature):
            return reject(Reason.BAD_SIGNATURE, f"PE evidence for {ev.entity}")
        if ev.result.issuer != issuer_entity or ev.result.pe != ev.entity:
            return reject(Reason.BAD_SIGNATURE, "signed result names a different issuer or PE")
        if ev.result.session_id != self.session_id:
            return reject(Reason.SESSION_MISMATCH, ev.result.session_id)
        if not ev.result.passed:
            return reject(Reason.PEER_VERDICT_FAIL, ev.result.reason)
        return ACCEPT

    def consume_pe_evidence(self, record: BoardRecord, peer_job: str) -> Verdict:
        """Verify the board's PE evidence for ``peer_job`` and record the outcome."""
        self._require(RpePhase.MUTUALLY_ATTESTED)
        if peer_job not in self.peer_jobs():
            raise UnknownJob(f"{peer_job} is not a collaborator of {self.entity}")
        job = self.policy.job(peer_job)
        try:
            ev = PeEvidence.from_payload(record.payload)
        except MalformedRecord as exc:
            verdict = reject(Reason.BAD_SIGNATURE, f"undecodable evidence: {exc}")
        else:
            if ev.entity != record.entity or ev.entity != job.pe:
                verdict = reject(Reason.BAD_SIGNATURE, "evidence entity mismatch")
            elif ev.result.job != peer_job:
                verdict = reject(Reason.BAD_SIGNATURE, "evidence job mismatch")
            else:
                verdict = self.verify_peer_pe_evidence(ev, job.rpe)
        previous = self.pe_verdicts.get(peer_job)
        if previous is not None and not previous.accepted:
            return verdict
        self.pe_verdicts[peer_job] = verdict
        if verdict.accepted:
            self.peer_pe_keys[peer_job] = ev.result.pe_public_key
        else:
            self._fail(verdict)
        return verdict

    def issue_pe_certificate(self, job_id: str | None = None) -> PeCertificate:
        self._require(RpePhase.MUTUALLY_ATTESTED, RpePhase.LOCALLY_VERIFIED)
        job = self._own_job(job_id)
        local = self.local_evidence.get(job.id)
        if local is None or not local.result.passed:
            raise PhaseError(f"{self.entity}: local PE of {job.id} has not passed verification")
        for peer, _role in peers_of(self.policy, job.id):
            if self.policy.job(peer).rpe == self.entity and peer in self.local_evidence:
                if self.local_evidence[peer].result.passed:
                    continue
            verdict = self.pe_verdicts.get(peer)
            if verdict is None or not verdict.accepted:
                raise PeerNotVerified(f"{self.entity}: PE evidence of {peer} not accepted ({verdict})")
        nonce = self._rng(32)
        pk = local.result.pe_public_key
        cert = PeCertificate(
            pe_public_key=pk,
            session_id=self.session_id,
            nonce=nonce,
            rpe_report=self._keypair.sign(certificate_digest(pk, self.session_id, nonce)),
        )
        self.certificates[job.id] = cert
        if self.phase is RpePhase.MUTUALLY_ATTESTED and all(j.id in self.certificates for j in self.own_jobs):
            self._advance(RpePhase.LOCALLY_VERIFIED)
        return cert

    def certificate_delivered(self, job_id: str | None = None) -> None:
        job = self._own_job(job_id)
        if job.id not in self.certificates:
            raise PhaseError(f"{self.entity}: no certificate issued for {job.id}")
        self._delivered.add(job.id)
        if self.phase is RpePhase.LOCALLY_VERIFIED and all(j.id in self._delivered for j in self.own_jobs):
            self._advance(RpePhase.READY)

    # -- collaborative preparation -------------------------------------------

    def verify_pe_certificate(self, cert: PeCertificate, peer_job: str) -> Verdict:
        self._require(RpePhase.READY)
        if peer_job not in self.peer_jobs():
            return reject(Reason.NO_SUCH_PEER, peer_job)
        issuer = self.policy.job(peer_job).rpe
        key = self._key_for(issuer)
        if key is None:
            return reject(Reason.NO_SUCH_PEER, f"no identifier recorded for {issuer}")
        if cert.suite != SUITE_ID:
            return reject(Reason.SUITE_MISMATCH, cert.suite)
        if not verify(key, cert.report_digest, cert.rpe_report):
            return reject(Reason.BAD_SIGNATURE, f"certificate not issued by {issuer}")
        if cert.session_id != self.session_id:
            return reject(Reason.SESSION_MISMATCH, cert.session_id)
        if issuer == self.entity:
            expected = self.local_evidence.get(peer_job)
            expected_key = expected.result.pe_public_key if expected and expected.result.passed else None
        else:
            expected_key = self.peer_pe_keys.get(peer_job)
        if expected_key is None:
            return reject(Reason.PEER_NOT_VERIFIED, peer_job)
        if expected_key != cert.pe_public_key:
            return reject(Reason.KEY_BINDING_MISMATCH, "certificate key differs from attested PE key")
        return ACCEPT

    # -- inspection -----------------------------------------------------------

    def snapshot(self) -> dict:
        """Everything this RPE would disclose about itself; no private material."""
        return {
            "entity": self.entity,
            "phase": self.phase.name,
            "session_id": self.policy.session_id if self.policy else None,
            "identifier": self._keypair.public.hex() if self._keypair else None,
            "peer_identifiers": {e: k.hex() for e, k in sorted(self.peer_identifiers.items())},
            "rpe_verdicts": {e: str(v) for e, v in sorted(self.rpe_verdicts.items())},
            "pe_verdicts": {j: str(v) for j, v in sorted(self.pe_verdicts.items())},
            "peer_pe_keys": {j: k.hex() for j, k in sorted(self.peer_pe_keys.items())},
            "certificates": {j: c.to_bytes().decode() for j, c in sorted(self.certificates.items())},
            "failure": str(self.failure) if self.failure else None,
        }
