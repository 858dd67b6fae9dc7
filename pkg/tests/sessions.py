"""Single-threaded session driver for tests.

Runs the same steps as the harness actors, in lock-step, so a test can stop
at any phase and poke at RPE state directly.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from sras.harness.config import ScenarioConfig, listing_config
from sras.harness.scenario import Infrastructure, build_infrastructure, generate_policy, new_session_id, pe_identity
from sras.pe import PeRuntime, pe_bootstrap
from sras.policy import Policy
from sras.rpe import RPE_IDENTITY, RelyingPartyEnclave
from sras.rpo import RelyingPartyOwner, RpoConfig
from sras.vnet import Board, RecordKind

STAGES = ("registered", "evidence", "attested", "local", "ready")


@dataclass
class Session:
    cfg: ScenarioConfig
    infra: Infrastructure
    policy: Policy
    board: Board
    rpes: dict[str, RelyingPartyEnclave] = field(default_factory=dict)
    pes: dict[str, PeRuntime] = field(default_factory=dict)  # by job id

    def rpe_of_job(self, job: str) -> RelyingPartyEnclave:
        return self.rpes[self.policy.job(job).rpe]


def drive(cfg: ScenarioConfig | None = None, *, infra: Infrastructure | None = None, policy: Policy | None = None,
          until: str = "ready", seed: int = 1, board: Board | None = None) -> Session:
    cfg = cfg or listing_config(seed=seed)
    infra = infra or build_infrastructure(cfg, seed=seed)
    policy = policy or generate_policy(cfg, infra, new_session_id(random.Random(seed)))
    s = Session(cfg, infra, policy, board or Board())
    stop = STAGES.index(until)

    for p in cfg.parties:
        rpe = RelyingPartyEnclave(p.rpe, infra.platform(p.rpe_platform), s.board)
        rpo = RelyingPartyOwner(RpoConfig(p.rpe, policy, RPE_IDENTITY.mrenclave))
        assert rpo.attest_local_rpe(rpe.registration_quote())
        rpo.deliver_policy(rpe)
        s.rpes[p.rpe] = rpe
        s.pes[p.job] = PeRuntime(p.pe, p.job, pe_identity(p.pe_identity), infra.platform(p.pe_platform), rpe)
    if stop < 1:
        return s

    for rpe in s.rpes.values():
        rpe.generate_rpe_evidence()
    if stop < 2:
        return s

    for rpe in s.rpes.values():
        for peer in rpe.other_rpes():
            assert rpe.consume_rpe_evidence(s.board.fetch(peer, RecordKind.RPE_EVIDENCE))
            assert rpe.verify_peer_announcement(s.board.fetch(peer, RecordKind.ANNOUNCEMENT))
    for rpe in s.rpes.values():
        rpe.complete_mutual_attestation()
    for rpe in s.rpes.values():
        for peer in rpe.other_rpes():
            assert rpe.verify_peer_consensus(s.board.fetch(peer, RecordKind.RPE_EVIDENCE))
    if stop < 3:
        return s

    for pe in s.pes.values():
        pe_bootstrap(pe)
    if stop < 4:
        return s

    for p in cfg.parties:
        rpe = s.rpes[p.rpe]
        for peer_job in rpe.peer_jobs():
            job = policy.job(peer_job)
            if job.rpe != p.rpe:
                assert rpe.consume_pe_evidence(s.board.fetch(job.pe, RecordKind.PE_EVIDENCE), peer_job)
    for p in cfg.parties:
        s.pes[p.job].install_certificate(s.rpes[p.rpe].issue_pe_certificate(p.job))
    return s
