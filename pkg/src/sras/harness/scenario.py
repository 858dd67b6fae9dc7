"""End-to-end scenario runner.

Each party (RPO + RPE + PE) runs as its own thread against the shared
board; the board is the only object the parties share.  Attacks are
injected at module seams only: the RPO policy-delivery hook, the board
tamper API and platform/identity substitution at launch.

Latency is cut the same way for every phase: *before* is local work up to
the phase's publish, *after* is processing of downloaded records.  Time
spent blocked on the board is excluded from both.
"""

from __future__ import annotations

import random
import threading
import time
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterator

from .. import canonical
from ..crypto import digest
from ..errors import (
    BoardTimeout,
    ConfigError,
    Deadlock,
    InvalidPolicy,
    LocalVerificationFailed,
    Missing,
    PeerNotVerified,
    PhaseError,
    SrasError,
)
from ..evidence import Reason, Verdict
from ..pe import PeRuntime, exchange_data, pe_bootstrap, run_handshake
from ..policy import (
    Connection,
    Job,
    PeEntry,
    Policy,
    RpeEntry,
    TcbCollateral,
    canonical_bytes,
    parse_policy,
    policy_from_dict,
    policy_to_dict,
    validate_policy,
)
from ..rpe import RPE_IDENTITY, RelyingPartyEnclave
from ..rpo import RelyingPartyOwner, RpoConfig
from ..tee import QEID_SIZE, EnclaveIdentity, Platform, RootAuthority, create_platform, create_root, make_collateral
from ..vnet import Board, BoardClient, BoardServer, RecordKind, TcpBoardClient
from .config import AttackSpec, PartySpec, PeIdentitySpec, ScenarioConfig
from .report import ConnectionOutcome, Detection, PartyOutcome, PhaseLatency, ScenarioReport

PHASES = ("Registration", "Mutual Attestation", "Local Verification", "Collaborative Preparation")
POLL_SLICE = 0.05

_EVIDENCE_TAMPER_REASONS = {
    RecordKind.RPE_EVIDENCE.value: {
        Reason.MALFORMED, Reason.QUOTE_INVALID, Reason.POLICY_MISMATCH, Reason.IDENTIFIER_MISMATCH,
        Reason.QEID_NOT_ALLOWED, Reason.MEASUREMENT_MISMATCH, Reason.UNKNOWN_ENTITY, Reason.BAD_SIGNATURE,
        Reason.SUITE_MISMATCH,
    },
    RecordKind.PE_EVIDENCE.value: {
        Reason.BAD_SIGNATURE, Reason.SESSION_MISMATCH, Reason.PEER_VERDICT_FAIL, Reason.UNKNOWN_ISSUER,
        Reason.SUITE_MISMATCH,
    },
    RecordKind.ANNOUNCEMENT.value: {Reason.BAD_SIGNATURE, Reason.SESSION_MISMATCH},
}
_EVIDENCE_REPLAY_REASONS = {
    RecordKind.RPE_EVIDENCE.value: {Reason.POLICY_MISMATCH},
    RecordKind.PE_EVIDENCE.value: {Reason.BAD_SIGNATURE, Reason.SESSION_MISMATCH},
    RecordKind.ANNOUNCEMENT.value: {Reason.BAD_SIGNATURE, Reason.SESSION_MISMATCH},
}


def expected_reasons(attack: AttackSpec) -> set[str]:
    """Rejection reasons that count as detecting ``attack``."""
    if attack.kind in ("forged-policy", "policy-replay"):
        out = {Reason.POLICY_MISMATCH}
    elif attack.kind == "evidence-tamper":
        out = _EVIDENCE_TAMPER_REASONS[attack.record]
    elif attack.kind == "evidence-replay":
        out = _EVIDENCE_REPLAY_REASONS[attack.record]
    elif attack.kind == "rogue-qeid":
        out = {Reason.QEID_NOT_ALLOWED}
    elif attack.kind == "stale-tcb":
        out = {Reason.TCB_OUT_OF_DATE}
    elif attack.kind == "wrong-measurement":
        out = {Reason.MEASUREMENT_MISMATCH} if attack.component == "rpe" else {Reason.IDENTITY_MISMATCH}
    else:  # pragma: no cover - parse_attack rejects unknown kinds
        raise ConfigError(attack.kind)
    return {r.value for r in out}


# -- infrastructure ---------------------------------------------------------


def label_bytes(label: str) -> bytes:
    """A 64-hex label is taken literally; anything else is hashed."""
    try:
        if len(label) == 64:
            return bytes.fromhex(label)
    except ValueError:
        pass
    return bytes(digest(label.encode("utf-8")))


def qeid_for(label: str) -> bytes:
    return bytes(digest(b"sras qeid\x00" + label.encode("utf-8")))[:QEID_SIZE]


def pe_identity(spec: PeIdentitySpec) -> EnclaveIdentity:
    return EnclaveIdentity(label_bytes(spec.mrenclave), label_bytes(spec.mrsigner), spec.isvprodid, spec.isvsvn)


@dataclass
class Infrastructure:
    """Simulated hardware shared by every session of one scenario."""

    root: RootAuthority
    platforms: dict[str, Platform]
    tcbs: dict[str, TcbCollateral]
    out_of_date_tcbs: dict[str, TcbCollateral]
    seed: int | None

    def platform(self, label: str) -> Platform:
        try:
            return self.platforms[label]
        except KeyError:
            raise ConfigError(f"unknown platform {label!r}") from None

    def extra_platform(self, label: str, like: Platform) -> Platform:
        """A platform outside every allow-list, same family and TCB as ``like``."""
        if label not in self.platforms:
            self.platforms[label], _ = create_platform(
                self.root, qeid_for(label), like.info.fmspc, like.info.tcb_svn
            )
        return self.platforms[label]


def _seed_bytes(seed: int | None, *parts: str) -> bytes | None:
    if seed is None:
        return None
    return bytes(digest(":".join(("sras", str(seed)) + parts).encode("utf-8")))


def build_infrastructure(cfg: ScenarioConfig, seed: int | None = None) -> Infrastructure:
    seed = cfg.seed if seed is None else seed
    root = create_root(_seed_bytes(seed, "root"))
    platforms = {}
    for spec in cfg.platforms:
        platforms[spec.label], _ = create_platform(root, qeid_for(spec.label), spec.fmspc, spec.tcb_svn)
    tcbs = {t.id: make_collateral(root, t.fmspc, t.levels, t.id) for t in cfg.tcbs}
    ood = {t.id: make_collateral(root, t.fmspc, t.levels, t.id) for t in cfg.out_of_date_tcbs}
    return Infrastructure(root, platforms, tcbs, ood, seed)


# -- policy generation ------------------------------------------------------


def _pe_entry(party: PartySpec) -> PeEntry:
    ident = pe_identity(party.pe_identity)
    rules = {"mrenclave": "exact", "mrsigner": "exact", "isvprodid": "exact", "isvsvn_minimum": party.pe_identity.isvsvn}
    rules.update(party.pe_policy)

    def pick(name: str, value):
        rule = rules.get(name)
        if rule == "any":
            return None
        if rule == "exact":
            return value
        raise ConfigError(f"pe_policy.{name} must be 'exact' or 'any', got {rule!r}")

    svn_rule = rules["isvsvn_minimum"]
    if svn_rule == "any":
        svn_min = None
    elif isinstance(svn_rule, int) and not isinstance(svn_rule, bool):
        svn_min = svn_rule
    else:
        raise ConfigError(f"pe_policy.isvsvn_minimum must be an integer or 'any', got {svn_rule!r}")
    return PeEntry(
        entity=party.pe,
        mrenclave=pick("mrenclave", ident.mrenclave.hex()),
        mrsigner=pick("mrsigner", ident.mrsigner.hex()),
        isvprodid=pick("isvprodid", ident.isvprodid),
        isvsvn_minimum=svn_min,
    )


def new_session_id(rng: random.Random | None = None) -> str:
    if rng is None:
        return str(uuid.uuid4())
    return str(uuid.UUID(int=rng.getrandbits(128), version=4))


def generate_policy(cfg: ScenarioConfig, infra: Infrastructure, session_id: str | None = None) -> Policy:
    """Build the consensus policy for ``cfg`` with concrete simulated values."""
    qhex = lambda label: digest(infra.platform(label).qeid).hex()
    policy = Policy(
        session_id=session_id or new_session_id(),
        tcbs=tuple(infra.tcbs.values()),
        out_of_date_tcbs=tuple(infra.out_of_date_tcbs.values()),
        rpes=tuple(RpeEntry(p.rpe, tuple(qhex(q) for q in p.qeid_allowed), p.tcb_allowed) for p in cfg.parties),
        pes=tuple(_pe_entry(p) for p in cfg.parties),
        jobs=tuple(
            Job(p.job, p.rpe, p.pe, tuple(qhex(q) for q in p.pe_qeid_allowed), p.out_of_tcb) for p in cfg.parties
        ),
        connections=tuple(Connection(server, clients) for server, clients in cfg.connections),
    )
    errors = validate_policy(policy)
    if errors:
        raise ConfigError("generated policy is invalid: " + "; ".join(map(str, errors)))
    return policy


# -- policy mutation (forged-policy attack) ---------------------------------

_REFERENCE_KEYS = {"id", "entity", "rpe", "pe", "server", "clients", "tcb_allowed", "out_of_tcb"}


def _leaves(node: Any, path: tuple = ()) -> Iterator[tuple]:
    if isinstance(node, dict):
        for k in sorted(node):
            if k in _REFERENCE_KEYS or k.endswith("_allow_any"):
                continue
            yield from _leaves(node[k], path + (k,))
    elif isinstance(node, list) and all(isinstance(x, str) for x in node):
        yield path  # string lists (allow-lists, revocation lists) mutate as a whole
        for i in range(len(node)):
            yield path + (i,)
    elif isinstance(node, list):
        for i, x in enumerate(node):
            yield from _leaves(x, path + (i,))
    else:
        yield path


def _mutate_value(value: Any, rng: random.Random) -> Any:
    if isinstance(value, bool):
        return not value
    if isinstance(value, int):
        return value + rng.randint(1, 7)
    if isinstance(value, list):
        return value + [digest(rng.randbytes(8)).hex()]
    if isinstance(value, str):
        hexdigits = "0123456789abcdef"
        if value and all(c in hexdigits for c in value):
            i = rng.randrange(len(value))
            return value[:i] + rng.choice(hexdigits.replace(value[i], "")) + value[i + 1 :]
        return value + rng.choice("xyz")
    raise TypeError(type(value))


def mutate_policy(policy: Policy, rng: random.Random, mutation: str = "random") -> tuple[Policy, str]:
    """Change exactly one non-reference field of ``policy``.

    Returns the still-valid mutated policy and the dotted path that changed.
    """
    doc = policy_to_dict(policy)
    if mutation == "session_id":
        path: tuple = ("Session ID",)
    else:
        paths = list(_leaves(doc))
        path = paths[rng.randrange(len(paths))]
    node = doc
    for key in path[:-1]:
        node = node[key]
    if path[-1] == "status":
        node["status"] = "OutOfDate" if node["status"] == "UpToDate" else "UpToDate"
    else:
        node[path[-1]] = _mutate_value(node[path[-1]], rng)
    mutated = policy_from_dict(doc)
    if validate_policy(mutated):  # pragma: no cover - references are never touched
        raise AssertionError(f"mutation of {path} broke the policy")
    return mutated, ".".join(map(str, path))


# -- party actor ------------------------------------------------------------


class _Stop(Exception):
    def __init__(self, status: str, detail: str = ""):
        self.status = status
        self.detail = detail
        super().__init__(f"{status}: {detail}")


@dataclass
class _Timer:
    spans: dict[tuple[str, str], float] = field(default_factory=dict)
    waited: float = 0.0

    @contextmanager
    def span(self, phase: str, part: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            key = (phase, part)
            self.spans[key] = self.spans.get(key, 0.0) + time.perf_counter() - t0


@dataclass
class _Launch:
    """What one party starts with after attack substitutions."""

    rpe_platform: Platform
    rpe_identity: EnclaveIdentity
    pe_platform: Platform
    pe_identity: EnclaveIdentity
    interceptor: Callable[[bytes], bytes] | None = None


class _Party:
    def __init__(self, spec: PartySpec, policy: Policy, launch: _Launch, board: BoardClient, *,
                 seed: int | None, deadline: float, baseline: int, owners: dict[str, str]):
        self.spec = spec
        self.policy = policy
        self.launch = launch
        self.board = board
        self.deadline = deadline
        self.baseline = baseline
        self.owners = owners
        self.timer = _Timer()
        self.status = "running"
        self.detail = ""
        self.detections: list[Detection] = []
        self.rpo = RelyingPartyOwner(RpoConfig(spec.rpe, policy, RPE_IDENTITY.mrenclave))
        nonce_rng = random.Random(None if seed is None else f"{seed}:{spec.rpe}:{policy.session_id}")
        self.rpe = RelyingPartyEnclave(
            spec.rpe,
            launch.rpe_platform,
            board,
            identity=launch.rpe_identity,
            key_seed=_seed_bytes(seed, "rpe", spec.rpe),
            rng=nonce_rng.randbytes if seed is not None else __import__("os").urandom,
        )
        self.pe = PeRuntime(
            spec.pe,
            spec.job,
            launch.pe_identity,
            launch.pe_platform,
            self.rpe,
            key_seed=_seed_bytes(seed, "pe", spec.pe, policy.session_id),
        )

    # -- board waiting --------------------------------------------------------

    def _await(self, entity: str, kind: RecordKind, newer_than: int = 0):
        owner = self.owners.get(entity, entity)
        newer_than = max(newer_than, self.baseline)
        t0 = time.perf_counter()
        try:
            while True:
                remaining = self.deadline - time.monotonic()
                if remaining <= 0:
                    raise _Stop("timeout", f"waiting for {kind.value}/{entity}")
                try:
                    return self.board.wait_for(entity, kind, min(POLL_SLICE, remaining), newer_than)
                except BoardTimeout:
                    pass
                try:
                    abort = self.board.fetch(owner, RecordKind.CONSENSUS_RESULT)
                except Missing:
                    continue
                if abort.sequence > self.baseline:
                    raise _Stop("peer-aborted", f"{owner} aborted")
        finally:
            self.timer.waited += time.perf_counter() - t0

    def _abort(self) -> None:
        # liveness hint only; nothing is ever accepted on the strength of it
        body = {"entity": self.spec.rpe, "session_id": self.policy.session_id, "status": self.status,
                "detail": self.detail}
        try:
            self.board.publish(self.spec.rpe, RecordKind.CONSENSUS_RESULT, canonical.dumps(body))
        except SrasError:
            pass

    def _detect(self, phase: str, subject: str, verdict: Verdict) -> None:
        self.detections.append(Detection(self.spec.rpe, phase, subject, verdict.reason.value, verdict.detail))

    def _reject(self, phase: str, subject: str, verdict: Verdict) -> None:
        self._detect(phase, subject, verdict)
        raise _Stop("rejected", f"{subject}: {verdict}")

    # -- phases ---------------------------------------------------------------

    def run(self) -> None:
        try:
            self._registration()
            self._mutual_attestation()
            self._local_verification()
            self.status = "ready"
        except _Stop as stop:
            self.status, self.detail = stop.status, stop.detail
        except (SrasError, ValueError) as exc:
            self.status, self.detail = "error", f"{type(exc).__name__}: {exc}"
        except Exception as exc:  # keep the actor from dying silently
            self.status, self.detail = "error", f"{type(exc).__name__}: {exc}"
        if self.status != "ready":
            self._abort()

    def _registration(self) -> None:
        phase = PHASES[0]
        with self.timer.span(phase, "before"):
            quote = self.rpe.registration_quote()
            verdict = self.rpo.attest_local_rpe(quote)
        if not verdict:
            self._reject(phase, self.spec.rpe, verdict)
        with self.timer.span(phase, "before"):
            try:
                self.rpo.deliver_policy(self.rpe, self.launch.interceptor)
            except InvalidPolicy as exc:
                raise _Stop("error", f"policy refused: {exc}") from None

    def _mutual_attestation(self) -> None:
        phase = PHASES[1]
        with self.timer.span(phase, "before"):
            self.rpe.generate_rpe_evidence()
        for peer in self.rpe.other_rpes():
            rec = self._await(peer, RecordKind.RPE_EVIDENCE)
            with self.timer.span(phase, "after"):
                verdict = self.rpe.consume_rpe_evidence(rec)
            if not verdict:
                self._reject(phase, peer, verdict)
            ann = self._await(peer, RecordKind.ANNOUNCEMENT)
            with self.timer.span(phase, "after"):
                verdict = self.rpe.verify_peer_announcement(ann)
            if not verdict:
                self._reject(phase, peer, verdict)
        with self.timer.span(phase, "after"):
            yes = self.rpe.complete_mutual_attestation()
        for peer in self.rpe.other_rpes():
            seen = 0
            while True:
                rec = self._await(peer, RecordKind.RPE_EVIDENCE, newer_than=seen)
                with self.timer.span(phase, "after"):
                    verdict = self.rpe.verify_peer_consensus(rec)
                if verdict:
                    break
                if verdict.reason is not Reason.PEER_NOT_VERIFIED:
                    self._reject(phase, peer, verdict)
                seen = rec.sequence
        del yes

    def _local_verification(self) -> None:
        phase = PHASES[2]
        with self.timer.span(phase, "before"):
            try:
                pe_bootstrap(self.pe)
            except LocalVerificationFailed:
                verdict = self.rpe.local_verdict(self.spec.job)
                self._reject(phase, self.spec.pe, verdict)
        for peer_job in self.rpe.peer_jobs():
            job = self.policy.job(peer_job)
            if job.rpe == self.spec.rpe:
                continue
            rec = self._await(job.pe, RecordKind.PE_EVIDENCE)
            with self.timer.span(phase, "after"):
                verdict = self.rpe.consume_pe_evidence(rec, peer_job)
            if not verdict:
                self._reject(phase, job.pe, verdict)
        with self.timer.span(phase, "after"):
            try:
                cert = self.rpe.issue_pe_certificate(self.spec.job)
            except (PeerNotVerified, PhaseError) as exc:
                raise _Stop("error", str(exc)) from None
            self.pe.install_certificate(cert)

    # -- reporting ------------------------------------------------------------

    def outcome(self) -> PartyOutcome:
        lat = {}
        for phase in PHASES[:3]:
            before = self.timer.spans.get((phase, "before"))
            after = self.timer.spans.get((phase, "after"))
            if phase == PHASES[0]:
                after = None
            lat[phase] = PhaseLatency(
                None if before is None else before * 1000, None if after is None else after * 1000
            )
        return PartyOutcome(
            rpe=self.spec.rpe,
            pe=self.spec.pe,
            job=self.spec.job,
            phase=self.rpe.phase.name,
            status=self.status,
            detail=self.detail,
            latency=lat,
            waited_ms=self.timer.waited * 1000,
        )


# -- attack plumbing --------------------------------------------------------


def _evidence_entity(cfg: ScenarioConfig, attack: AttackSpec) -> str:
    """Board key of the record an evidence attack targets."""
    if attack.record == RecordKind.PE_EVIDENCE.value:
        for p in cfg.parties:
            if attack.target in (p.rpe, p.pe):
                return p.pe
    for p in cfg.parties:
        if attack.target in (p.rpe, p.pe):
            return p.rpe
    raise ConfigError(f"attack {attack} targets unknown party")


def _party_of(cfg: ScenarioConfig, target: str) -> PartySpec:
    for p in cfg.parties:
        if target in (p.rpe, p.pe):
            return p
    raise ConfigError(f"no party {target!r}")


def _flip(index: int) -> Callable[[bytes], bytes]:
    def mutate(payload: bytes) -> bytes:
        if not 0 <= index < len(payload):
            raise ConfigError(f"byte index {index} outside payload of {len(payload)} bytes")
        out = bytearray(payload)
        out[index] ^= 0x01
        return bytes(out)

    return mutate


def _rogue_platform(cfg: ScenarioConfig, infra: Infrastructure, party: PartySpec, attack: AttackSpec,
                    policy: Policy) -> Platform:
    if attack.platform:
        return infra.platform(attack.platform)
    if attack.component == "rpe":
        allowed, original = set(party.qeid_allowed), party.rpe_platform
        fmspcs = {policy.tcb(t).fmspc for t in party.tcb_allowed}
    else:
        allowed, original = set(party.pe_qeid_allowed), party.pe_platform
        fmspcs = {t.fmspc for t in policy.tcbs}
    for spec in cfg.platforms:
        if spec.label not in allowed and spec.fmspc in fmspcs:
            return infra.platform(spec.label)
    return infra.extra_platform(f"rogue-{attack.component}-{party.rpe}", infra.platform(original))


def _stale_platform(infra: Infrastructure, party: PartySpec, policy: Policy) -> Platform:
    platform = infra.platform(party.pe_platform)
    for tcb_id in party.out_of_tcb:
        stale = policy.out_of_date_tcb(tcb_id)
        if stale.fmspc != platform.info.fmspc or isinstance(stale.data, str):
            continue
        for level in stale.data.tcb_levels:
            if stale.data.lists_out_of_date(level.svn):
                return platform.reprovisioned(level.svn)
    raise ConfigError(f"{party.job}: no out-of-date TCB level applies to platform {party.pe_platform}")


def _wrong_identity(identity: EnclaveIdentity) -> EnclaveIdentity:
    return replace(
        identity,
        mrenclave=bytes(digest(b"rogue build\x00" + identity.mrenclave)),
        mrsigner=bytes(digest(b"rogue signer\x00" + identity.mrsigner)),
    )


# -- the runner -------------------------------------------------------------


@dataclass
class _Session:
    policy: Policy
    board: Board | None
    parties: dict[str, _Party]


def _open_board(cfg: ScenarioConfig):
    """Returns (board for tampering or None, client factory, closer)."""
    if cfg.transport == "inmem":
        board = Board()
        return board, lambda: board, lambda: None
    if cfg.coordinator is not None:
        clients: list[TcpBoardClient] = []

        def factory():
            clients.append(TcpBoardClient(cfg.coordinator))
            return clients[-1]

        return None, factory, lambda: [c.close() for c in clients]
    server = BoardServer().start()
    clients = []

    def factory():
        clients.append(TcpBoardClient(server.address))
        return clients[-1]

    def close():
        for c in clients:
            c.close()
        server.stop()

    return server.board, factory, close


def _baseline(client: BoardClient) -> int:
    seq = 0
    for kind in RecordKind:
        for rec in client.fetch_all(kind):
            seq = max(seq, rec.sequence)
    return seq


def _launches(cfg: ScenarioConfig, infra: Infrastructure, policy: Policy, attacks: tuple[AttackSpec, ...],
              previous: _Session | None, rng: random.Random, notes: list[str]) -> dict[str, _Launch]:
    out = {
        p.rpe: _Launch(infra.platform(p.rpe_platform), RPE_IDENTITY, infra.platform(p.pe_platform),
                       pe_identity(p.pe_identity))
        for p in cfg.parties
    }
    for attack in attacks:
        if attack.kind in ("evidence-tamper", "evidence-replay"):
            continue
        party = _party_of(cfg, attack.target)
        launch = out[party.rpe]
        if attack.kind == "forged-policy":
            forged, path = mutate_policy(policy, rng, attack.mutation)
            notes.append(f"{attack}: changed {path}")
            launch.interceptor = lambda _pt, data=canonical_bytes(forged): data
        elif attack.kind == "policy-replay":
            old = canonical_bytes(previous.policy)
            launch.interceptor = lambda _pt, data=old: data
        elif attack.kind == "rogue-qeid":
            platform = _rogue_platform(cfg, infra, party, attack, policy)
            notes.append(f"{attack}: launched on qeid digest {digest(platform.qeid).hex()[:16]}")
            if attack.component == "rpe":
                launch.rpe_platform = platform
            else:
                launch.pe_platform = platform
        elif attack.kind == "stale-tcb":
            launch.pe_platform = _stale_platform(infra, party, policy)
            notes.append(f"{attack}: PE platform at tcb_svn {launch.pe_platform.info.tcb_svn}")
        elif attack.kind == "wrong-measurement":
            if attack.component == "rpe":
                launch.rpe_identity = _wrong_identity(launch.rpe_identity)
            else:
                launch.pe_identity = _wrong_identity(launch.pe_identity)
    return out


def _run_session(cfg: ScenarioConfig, infra: Infrastructure, policy: Policy, attacks: tuple[AttackSpec, ...],
                 previous: _Session | None, rng: random.Random, notes: list[str], t_start: float):
    board, factory, close = _open_board(cfg)
    if attacks and board is None and any(a.kind.startswith("evidence") for a in attacks):
        raise ConfigError("evidence attacks need the in-process board; drop --coordinator")
    try:
        for attack in attacks:
            if attack.kind == "evidence-tamper":
                board.tamper_on_publish(_evidence_entity(cfg, attack), RecordKind(attack.record), _flip(attack.byte))
            elif attack.kind == "evidence-replay":
                entity = _evidence_entity(cfg, attack)
                history = previous.board.contents().get((entity, attack.record)) if previous.board else None
                if not history:
                    raise ConfigError(f"{attack}: previous session has no {attack.record}/{entity}")
                old = history[0]
                board.tamper_on_publish(entity, RecordKind(attack.record), lambda _p, data=old: data)
        launches = _launches(cfg, infra, policy, attacks, previous, rng, notes)
        baseline = _baseline(factory())
        owners = {p.pe: p.rpe for p in cfg.parties}
        deadline = time.monotonic() + max(0.0, cfg.timeout - (time.perf_counter() - t_start))
        parties = {
            p.rpe: _Party(p, policy, launches[p.rpe], factory(), seed=infra.seed, deadline=deadline,
                          baseline=baseline, owners=owners)
            for p in cfg.parties
        }
        threads = [threading.Thread(target=party.run, name=name, daemon=True) for name, party in parties.items()]
        for t in threads:
            t.start()
        for t in threads:
            t.join(max(0.0, deadline - time.monotonic()) + 1.0)
        stuck = [t.name for t in threads if t.is_alive()]
        if stuck:
            raise Deadlock(f"parties did not finish: {stuck}", {n: p.rpe.snapshot() for n, p in parties.items()})
        connections = _collaborate(cfg, policy, parties)
    finally:
        close()
    return _Session(policy, board, parties), connections


def _collaborate(cfg: ScenarioConfig, policy: Policy, parties: dict[str, _Party]) -> list[ConnectionOutcome]:
    by_job = {p.spec.job: p for p in parties.values()}
    out = []
    for conn in policy.connections:
        for client_job in conn.clients:
            server, client = by_job.get(conn.server), by_job.get(client_job)
            if server is None or client is None or server.pe.certificate is None or client.pe.certificate is None:
                out.append(ConnectionOutcome(conn.server, client_job, False, "NotReady", None, False))
                continue
            t0 = time.perf_counter()
            result = run_handshake(client.pe, server.pe, transport=cfg.transport, timeout=min(cfg.timeout, 10.0))
            elapsed = (time.perf_counter() - t0) * 1000
            roundtrip = False
            if result.established:
                ping, pong = b"ping " + client_job.encode(), b"pong " + conn.server.encode()
                roundtrip = (
                    exchange_data(result.client, result.server, ping) == ping
                    and exchange_data(result.server, result.client, pong) == pong
                )
            else:
                for side, err in ((server, result.server_error), (client, result.client_error)):
                    if err is not None and err.reason != "PeerAlert":
                        side.detections.append(
                            Detection(side.spec.rpe, PHASES[3], f"{conn.server}<-{client_job}", err.reason, str(err))
                        )
            out.append(ConnectionOutcome(conn.server, client_job, result.established, result.reason, elapsed, roundtrip))
    return out


def board_fingerprint(board: Board) -> str:
    """Digest of the full board history, independent of thread interleaving."""
    contents = board.contents()
    doc = {f"{kind}/{entity}": [p.hex() for p in history] for (entity, kind), history in sorted(contents.items())}
    return digest(canonical.dumps(doc)).hex()


def resolve_policy(cfg: ScenarioConfig, infra: Infrastructure, rng: random.Random) -> Policy:
    if cfg.policy_file:
        try:
            with open(cfg.policy_file, "rb") as fh:
                return parse_policy(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read policy {cfg.policy_file}: {exc}") from None
    return generate_policy(cfg, infra, new_session_id(rng))


def run_scenario(cfg: ScenarioConfig, *, infra: Infrastructure | None = None) -> ScenarioReport:
    """Run all four phases for every party and judge the attacks, if any."""
    t_start = time.perf_counter()
    infra = infra or build_infrastructure(cfg)
    rng = random.Random(cfg.seed) if cfg.seed is not None else random.Random()
    notes: list[str] = []

    previous = None
    if any(a.kind in ("policy-replay", "evidence-replay") for a in cfg.attacks):
        old_cfg = replace(cfg, attacks=(), transport="inmem", coordinator=None, policy_file=None)
        old_policy = generate_policy(old_cfg, infra, new_session_id(rng))
        previous, _ = _run_session(old_cfg, infra, old_policy, (), None, rng, [], time.perf_counter())
        notes.append(f"previous session {old_policy.session_id} recorded for replay")
        t_start = time.perf_counter()

    policy = resolve_policy(cfg, infra, rng)
    session, connections = _run_session(cfg, infra, policy, cfg.attacks, previous, rng, notes, t_start)
    wall = (time.perf_counter() - t_start) * 1000

    detections = [d for p in session.parties.values() for d in p.detections]
    report = ScenarioReport(
        session_id=policy.session_id,
        transport=cfg.transport,
        parties=[p.outcome() for p in session.parties.values()],
        connections=connections,
        detections=detections,
        attacks=[str(a) for a in cfg.attacks],
        wall_ms=wall,
        notes=notes,
        board_log=session.board.log_lines() if session.board is not None else [],
        board_fingerprint=board_fingerprint(session.board) if session.board is not None else None,
        rpo_log=[line.render() for p in session.parties.values() for line in p.rpo.log],
    )
    for attack in cfg.attacks:
        wanted = expected_reasons(attack)
        hits = [d for d in detections if d.reason in wanted]
        report.attack_results.append((str(attack), bool(hits), sorted({d.reason for d in hits})))

    if not cfg.attacks:
        stuck = [p for p in session.parties.values() if p.status in ("timeout", "peer-aborted")]
        if stuck and not detections:
            raise Deadlock(
                "honest run stalled: " + ", ".join(f"{p.spec.rpe}={p.status}" for p in stuck),
                {p.spec.rpe: p.rpe.snapshot() for p in session.parties.values()},
            )
    return report
