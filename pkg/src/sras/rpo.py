"""Relying Party Owner: attests the local RPE and hands it the policy."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

from .crypto import digest, generate_ephemeral, hkdf, seal
from .errors import ChannelFailure, NotAttested, UnknownEntity
from .evidence import ACCEPT, Reason, Verdict, reject
from .policy import Policy, canonical_bytes
from .rpe import POLICY_CHANNEL_LABEL, RelyingPartyEnclave, resolve_collateral
from .tee import Quote, VerificationStatus, verify_quote


@dataclass(frozen=True)
class RpoConfig:
    entity: str
    policy: Policy
    trusted_rpe_measurement: bytes

    def __post_init__(self):
        try:
            self.policy.rpe(self.entity)
        except UnknownEntity:
            raise ValueError(f"{self.entity} is not an RPE entity of the policy") from None


@dataclass(frozen=True)
class LogLine:
    phase: str
    subject: str
    verdict: str
    detail: str = ""
    timestamp: float = field(default_factory=time.time)

    def render(self) -> str:
        return f"{self.timestamp:.6f}\t{self.phase}\t{self.subject}\t{self.verdict}\t{self.detail}"


# transforms the policy plaintext in flight; attack scenarios only
PolicyInterceptor = Callable[[bytes], bytes]


class RelyingPartyOwner:
    def __init__(self, cfg: RpoConfig):
        self.cfg = cfg
        self.log: list[LogLine] = []
        self._attested: Quote | None = None

    def attest_local_rpe(self, rpe_quote: Quote) -> Verdict:
        verdict = self._appraise(rpe_quote)
        self._attested = rpe_quote if verdict.accepted else None
        self.log.append(
            LogLine("registration", self.cfg.entity, "Accept" if verdict else "Reject",
                    "" if verdict else f"{verdict.reason.value} {verdict.detail}".strip())
        )
        return verdict

    def _appraise(self, quote: Quote) -> Verdict:
        policy = self.cfg.policy
        entry = policy.rpe(self.cfg.entity)
        allowed = [policy.tcb(t) for t in entry.tcb_allowed]
        collateral = resolve_collateral(allowed, quote.platform.fmspc)
        if collateral is None:
            return reject(Reason.QUOTE_INVALID, VerificationStatus.UNKNOWN_FMSPC.value)
        outcome = verify_quote(quote, collateral)
        if outcome.status is not VerificationStatus.UP_TO_DATE:
            return reject(Reason.QUOTE_INVALID, outcome.status.value)
        if outcome.report.mrenclave != self.cfg.trusted_rpe_measurement:
            return reject(Reason.MEASUREMENT_MISMATCH, outcome.report.mrenclave.hex())
        qeid_hex = digest(quote.platform.qeid).hex()
        if qeid_hex not in entry.qeid_allowed:
            return reject(Reason.QEID_NOT_ALLOWED, qeid_hex)
        return ACCEPT

    def deliver_policy(self, rpe: RelyingPartyEnclave, interceptor: PolicyInterceptor | None = None) -> None:
        """Send the policy over a channel bound to the attested quote's report_data."""
        if self._attested is None:
            raise NotAttested(f"{self.cfg.entity}: local RPE not attested")
        report_data = self._attested.report.report_data
        if digest(rpe.channel_public) != report_data[:32]:
            raise ChannelFailure("RPE channel key does not match the attested quote")
        plaintext = canonical_bytes(self.cfg.policy)
        if interceptor is not None:
            plaintext = interceptor(plaintext)
        eph = generate_ephemeral()
        key = hkdf(eph.exchange(rpe.channel_public), report_data, POLICY_CHANNEL_LABEL)
        envelope = eph.public + seal(key, bytes(12), plaintext, rpe.entity.encode("utf-8"))
        rpe.receive_policy(envelope)
        self.log.append(LogLine("registration", self.cfg.entity, "PolicyDelivered"))

    def log_text(self) -> str:
        return "\n".join(line.render() for line in self.log)
