"""Scenario report and its text / JSON renderings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from statistics import mean

PHASE_ROWS = ("Registration", "Mutual Attestation", "Local Verification", "Collaborative Preparation")


@dataclass(frozen=True)
class PhaseLatency:
    before_ms: float | None
    after_ms: float | None

    @property
    def total_ms(self) -> float | None:
        parts = [x for x in (self.before_ms, self.after_ms) if x is not None]
        return sum(parts) if parts else None


@dataclass(frozen=True)
class Detection:
    party: str  # RPE entity of the detecting party
    phase: str
    subject: str  # entity / job / connection the rejection is about
    reason: str
    detail: str = ""


@dataclass
class PartyOutcome:
    rpe: str
    pe: str
    job: str
    phase: str  # RPE phase reached
    status: str  # ready | rejected | timeout | peer-aborted | error
    detail: str
    latency: dict[str, PhaseLatency]
    waited_ms: float = 0.0


@dataclass(frozen=True)
class ConnectionOutcome:
    server: str
    client: str
    established: bool
    reason: str | None
    latency_ms: float | None
    roundtrip: bool


@dataclass
class ScenarioReport:
    session_id: str
    transport: str
    parties: list[PartyOutcome]
    connections: list[ConnectionOutcome]
    detections: list[Detection]
    attacks: list[str]
    wall_ms: float
    notes: list[str] = field(default_factory=list)
    board_log: list[str] = field(default_factory=list)
    rpo_log: list[str] = field(default_factory=list)
    board_fingerprint: str | None = None
    # (attack, detected, matching reasons)
    attack_results: list[tuple[str, bool, list[str]]] = field(default_factory=list)

    @property
    def undetected(self) -> list[str]:
        return [a for a, hit, _ in self.attack_results if not hit]

    @property
    def all_ready(self) -> bool:
        return all(p.status == "ready" for p in self.parties)

    @property
    def all_connected(self) -> bool:
        return bool(self.connections) and all(c.established and c.roundtrip for c in self.connections)

    @property
    def ok(self) -> bool:
        """Expectations met: honest runs connect everything, attacked runs detect every attack."""
        if self.attacks:
            return not self.undetected
        return self.all_ready and self.all_connected

    def latency(self) -> dict[str, PhaseLatency]:
        """Per-phase latency averaged over the parties that did the work."""
        out = {}
        for phase in PHASE_ROWS[:3]:
            befores = [p.latency[phase].before_ms for p in self.parties if p.latency[phase].before_ms is not None]
            afters = [p.latency[phase].after_ms for p in self.parties if p.latency[phase].after_ms is not None]
            out[phase] = PhaseLatency(mean(befores) if befores else None, mean(afters) if afters else None)
        return out

    def collaborative_ms(self) -> float | None:
        times = [c.latency_ms for c in self.connections if c.established and c.latency_ms is not None]
        return mean(times) if times else None

    def to_json(self) -> dict:
        lat = self.latency()
        rows = {
            phase: {"before_ms": lat[phase].before_ms, "after_ms": lat[phase].after_ms, "total_ms": lat[phase].total_ms}
            for phase in PHASE_ROWS[:3]
        }
        rows[PHASE_ROWS[3]] = {"before_ms": None, "after_ms": None, "total_ms": self.collaborative_ms()}
        return {
            "ok": self.ok,
            "session_id": self.session_id,
            "transport": self.transport,
            "wall_ms": self.wall_ms,
            "board_fingerprint": self.board_fingerprint,
            "latency": rows,
            "parties": [
                {**{k: v for k, v in asdict(p).items() if k != "latency"},
                 "latency": {ph: asdict(l) for ph, l in p.latency.items()}}
                for p in self.parties
            ],
            "connections": [asdict(c) for c in self.connections],
            "detections": [asdict(d) for d in self.detections],
            "attacks": [{"attack": a, "detected": hit, "reasons": reasons} for a, hit, reasons in self.attack_results],
            "undetected": self.undetected,
            "notes": self.notes,
            "rpo_log": self.rpo_log,
            "board_log": self.board_log,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def _cell(value: float | None) -> str:
    return "N/A" if value is None else f"{value:.1f}"


def report_render(report: ScenarioReport) -> str:
    """Text report; the latency block has one row per phase."""
    lat = report.latency()
    rows = [(phase, lat[phase].before_ms, lat[phase].after_ms, lat[phase].total_ms) for phase in PHASE_ROWS[:3]]
    rows.append((PHASE_ROWS[3], None, None, report.collaborative_ms()))
    width = max(len(r[0]) for r in rows)
    lines = [
        f"session {report.session_id}  transport {report.transport}  wall {report.wall_ms:.1f} ms",
        "",
        f"{'Phase':<{width}} | {'Before':>8} | {'After':>8} | {'Total':>8}   (latency/ms)",
        f"{'-' * width}-+-{'-' * 8}-+-{'-' * 8}-+-{'-' * 8}",
    ]
    for name, before, after, total in rows:
        lines.append(f"{name:<{width}} | {_cell(before):>8} | {_cell(after):>8} | {_cell(total):>8}")
    lines += ["", "parties:"]
    for p in report.parties:
        extra = f"  ({p.detail})" if p.detail else ""
        lines.append(f"  {p.rpe}/{p.pe} {p.job}: {p.status} at {p.phase}{extra}")
    lines.append("connections:")
    for c in report.connections:
        state = "established" if c.established else f"failed ({c.reason})"
        data = ", data round-trip ok" if c.roundtrip else ""
        lines.append(f"  {c.client} -> {c.server}: {state}{data}")
    if report.detections:
        lines.append("detections:")
        for d in report.detections:
            lines.append(f"  {d.party} [{d.phase}] rejected {d.subject}: {d.reason}")
    if report.attack_results:
        lines.append("attacks:")
        for attack, hit, reasons in report.attack_results:
            lines.append(f"  {attack}: {'detected (' + ', '.join(reasons) + ')' if hit else 'UNDETECTED'}")
    for note in report.notes:
        lines.append(f"note: {note}")
    lines.append(f"result: {'OK' if report.ok else 'FAILED'}")
    return "\n".join(lines)
