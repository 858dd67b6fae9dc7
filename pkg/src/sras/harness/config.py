"""Scenario configuration and attack specifications.

Configs are JSON documents (format in docs/scenario-format.md).  Platform
qeids, measurements and collateral are referred to by label; the harness
turns labels into concrete simulated values when it builds a run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..errors import ConfigError
from ..policy import TcbStatus
from ..vnet import RecordKind

ATTACK_KINDS = (
    "forged-policy",
    "policy-replay",
    "evidence-tamper",
    "evidence-replay",
    "rogue-qeid",
    "stale-tcb",
    "wrong-measurement",
)


@dataclass(frozen=True)
class PlatformSpec:
    label: str
    fmspc: str
    tcb_svn: int


@dataclass(frozen=True)
class TcbSpec:
    id: str
    fmspc: str
    levels: dict[int, TcbStatus]


@dataclass(frozen=True)
class PeIdentitySpec:
    mrenclave: str
    mrsigner: str
    isvprodid: int = 0
    isvsvn: int = 0


@dataclass(frozen=True)
class PartySpec:
    rpe: str
    rpe_platform: str
    qeid_allowed: tuple[str, ...]
    tcb_allowed: tuple[str, ...]
    pe: str
    pe_platform: str
    job: str
    pe_qeid_allowed: tuple[str, ...]
    out_of_tcb: tuple[str, ...]
    pe_identity: PeIdentitySpec
    # which PE fields the policy pins: "exact" / "any"; isvsvn_minimum is an int or "any"
    pe_policy: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    target: str
    record: str | None = None  # RecordKind value for evidence attacks
    byte: int | None = None
    component: str = "rpe"  # rogue-qeid / wrong-measurement: "rpe" or "pe"
    mutation: str = "session_id"  # forged-policy: "session_id" or "random"
    platform: str | None = None  # rogue-qeid: platform label to launch on

    def __str__(self) -> str:
        parts = [self.kind, self.target]
        if self.kind in ("evidence-tamper", "evidence-replay"):
            parts.append(self.record or "")
        if self.kind == "evidence-tamper":
            parts.append(str(self.byte))
        if self.kind in ("rogue-qeid", "wrong-measurement"):
            parts.append(self.component)
        if self.kind == "rogue-qeid" and self.platform:
            parts.append(self.platform)
        if self.kind == "forged-policy":
            parts.append(self.mutation)
        return ":".join(parts)


@dataclass(frozen=True)
class ScenarioConfig:
    platforms: tuple[PlatformSpec, ...]
    tcbs: tuple[TcbSpec, ...]
    out_of_date_tcbs: tuple[TcbSpec, ...]
    parties: tuple[PartySpec, ...]
    connections: tuple[tuple[str, tuple[str, ...]], ...]
    transport: str = "inmem"
    coordinator: tuple[str, int] | None = None
    attacks: tuple[AttackSpec, ...] = ()
    timeout: float = 10.0
    seed: int | None = None
    policy_file: str | None = None

    def party(self, rpe_entity: str) -> PartySpec:
        for p in self.parties:
            if p.rpe == rpe_entity:
                return p
        raise ConfigError(f"no party with RPE entity {rpe_entity!r}")

    def platform(self, label: str) -> PlatformSpec:
        for p in self.platforms:
            if p.label == label:
                return p
        raise ConfigError(f"unknown platform label {label!r}")


# -- attack strings ---------------------------------------------------------


def parse_attack(text: str) -> AttackSpec:
    """``kind:target[:args...]``; see docs/scenario-format.md for each kind."""
    parts = text.split(":")
    kind, args = parts[0], parts[1:]
    if kind not in ATTACK_KINDS:
        raise ConfigError(f"unknown attack kind {kind!r}; expected one of {', '.join(ATTACK_KINDS)}")
    if not args or not args[0]:
        raise ConfigError(f"attack {text!r} needs a target")
    target = args[0]
    try:
        if kind == "forged-policy":
            mutation = args[1] if len(args) > 1 else "session_id"
            if mutation not in ("session_id", "random"):
                raise ConfigError(f"forged-policy mutation must be session_id or random, got {mutation!r}")
            return AttackSpec(kind, target, mutation=mutation)
        if kind in ("policy-replay", "stale-tcb"):
            return AttackSpec(kind, target)
        if kind == "evidence-tamper":
            return AttackSpec(kind, target, record=RecordKind(args[1]).value, byte=int(args[2]))
        if kind == "evidence-replay":
            return AttackSpec(kind, target, record=RecordKind(args[1]).value)
        component = args[1] if len(args) > 1 else "rpe"
        if component not in ("rpe", "pe"):
            raise ConfigError(f"component must be rpe or pe, got {component!r}")
        platform = args[2] if kind == "rogue-qeid" and len(args) > 2 else None
        return AttackSpec(kind, target, component=component, platform=platform)
    except (IndexError, ValueError) as exc:
        raise ConfigError(f"bad attack spec {text!r}: {exc}") from None


# -- loading ----------------------------------------------------------------


def _levels(obj: dict) -> dict[int, TcbStatus]:
    try:
        return {int(k): TcbStatus(v) for k, v in obj.items()}
    except (ValueError, AttributeError) as exc:
        raise ConfigError(f"bad TCB levels {obj!r}: {exc}") from None


def config_from_dict(doc: dict, base_dir: Path | None = None) -> ScenarioConfig:
    try:
        platforms = tuple(PlatformSpec(p["label"], p["fmspc"], int(p["tcb_svn"])) for p in doc["platforms"])
        tcbs = tuple(TcbSpec(t["id"], t["fmspc"], _levels(t["levels"])) for t in doc["tcbs"])
        ood = tuple(TcbSpec(t["id"], t["fmspc"], _levels(t["levels"])) for t in doc.get("out_of_date_tcbs", []))
        parties = []
        for p in doc["parties"]:
            ident = p["pe_identity"]
            parties.append(
                PartySpec(
                    rpe=p["rpe"],
                    rpe_platform=p["rpe_platform"],
                    qeid_allowed=tuple(p["qeid_allowed"]),
                    tcb_allowed=tuple(p["tcb_allowed"]),
                    pe=p["pe"],
                    pe_platform=p["pe_platform"],
                    job=p["job"],
                    pe_qeid_allowed=tuple(p["pe_qeid_allowed"]),
                    out_of_tcb=tuple(p.get("out_of_tcb", [])),
                    pe_identity=PeIdentitySpec(
                        ident["mrenclave"], ident["mrsigner"], int(ident.get("isvprodid", 0)), int(ident.get("isvsvn", 0))
                    ),
                    pe_policy=dict(p.get("pe_policy", {})),
                )
            )
        connections = tuple((c["server"], tuple(c["clients"])) for c in doc["connections"])
        attacks = tuple(parse_attack(a) if isinstance(a, str) else parse_attack(a["spec"]) for a in doc.get("attacks", []))
        policy_file = doc.get("policy")
        if policy_file and base_dir is not None:
            policy_file = str((base_dir / policy_file).resolve())
        coordinator = doc.get("coordinator")
        if coordinator:
            host, _, port = coordinator.rpartition(":")
            coordinator = (host, int(port))
        cfg = ScenarioConfig(
            platforms=platforms,
            tcbs=tcbs,
            out_of_date_tcbs=ood,
            parties=tuple(parties),
            connections=connections,
            transport=doc.get("transport", "inmem"),
            coordinator=coordinator,
            attacks=attacks,
            timeout=float(doc.get("timeout", 10.0)),
            seed=doc.get("seed"),
            policy_file=policy_file,
        )
    except KeyError as exc:
        raise ConfigError(f"missing config key {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad config: {exc}") from None
    check_config(cfg)
    return cfg


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return config_from_dict(doc, path.parent)


def check_config(cfg: ScenarioConfig) -> None:
    if cfg.transport not in ("inmem", "tcp"):
        raise ConfigError(f"transport must be inmem or tcp, got {cfg.transport!r}")
    if cfg.timeout <= 0:
        raise ConfigError("timeout must be positive")
    labels = [p.label for p in cfg.platforms]
    if len(set(labels)) != len(labels):
        raise ConfigError("duplicate platform labels")
    rpes = [p.rpe for p in cfg.parties]
    if len(set(rpes)) != len(rpes):
        raise ConfigError("each party needs a distinct RPE entity")
    for p in cfg.parties:
        cfg.platform(p.rpe_platform)
        cfg.platform(p.pe_platform)
    entities = set(rpes) | {p.pe for p in cfg.parties}
    for a in cfg.attacks:
        if a.target not in entities:
            raise ConfigError(f"attack {a} targets unknown party {a.target!r}")
        if a.kind == "rogue-qeid" and a.platform is not None:
            cfg.platform(a.platform)


# -- presets ----------------------------------------------------------------

LISTING_CONFIG: dict[str, Any] = {
    "platforms": [
        {"label": "qeid1", "fmspc": "fmspc value 1", "tcb_svn": 3},
        {"label": "qeid2", "fmspc": "fmspc value 2", "tcb_svn": 5},
        {"label": "qeid3", "fmspc": "fmspc value 1", "tcb_svn": 3},
    ],
    "tcbs": [
        {"id": "tcb-1", "fmspc": "fmspc value 1", "levels": {"3": "UpToDate", "2": "OutOfDate"}},
        {"id": "tcb-2", "fmspc": "fmspc value 2", "levels": {"5": "UpToDate"}},
    ],
    "out_of_date_tcbs": [
        {"id": "tcb-1", "fmspc": "fmspc value 1", "levels": {"2": "OutOfDate"}},
    ],
    "parties": [
        {
            "rpe": "rpe-1", "rpe_platform": "qeid1",
            "qeid_allowed": ["qeid1", "qeid2"], "tcb_allowed": ["tcb-1"],
            "pe": "pe-1", "pe_platform": "qeid1", "job": "job-1",
            "pe_qeid_allowed": ["qeid1"], "out_of_tcb": ["tcb-1"],
            "pe_identity": {"mrenclave": "pe-1 enclave", "mrsigner": "party 1 signer", "isvprodid": 0, "isvsvn": 1},
            "pe_policy": {"mrenclave": "exact", "mrsigner": "any", "isvprodid": "any", "isvsvn_minimum": "any"},
        },
        {
            "rpe": "rpe-2", "rpe_platform": "qeid3",
            "qeid_allowed": ["qeid3"], "tcb_allowed": ["tcb-1", "tcb-2"],
            "pe": "pe-2", "pe_platform": "qeid2", "job": "job-2",
            "pe_qeid_allowed": ["qeid2"], "out_of_tcb": ["tcb-1"],
            "pe_identity": {"mrenclave": "pe-2 enclave", "mrsigner": "party 2 signer", "isvprodid": 0, "isvsvn": 5},
            "pe_policy": {"mrenclave": "any", "mrsigner": "exact", "isvprodid": "exact", "isvsvn_minimum": 0},
        },
    ],
    "connections": [{"server": "job-2", "clients": ["job-1"]}],
}


def listing_config(**overrides) -> ScenarioConfig:
    """Two parties laid out exactly like the reference policy listing."""
    doc = dict(LISTING_CONFIG)
    doc.update({k: v for k, v in overrides.items() if k != "attacks"})
    cfg = config_from_dict(doc)
    attacks = overrides.get("attacks", ())
    attacks = tuple(parse_attack(a) if isinstance(a, str) else a for a in attacks)
    cfg = _replace(cfg, attacks=attacks)
    check_config(cfg)
    return cfg


def n_party_config(n: int, **overrides) -> ScenarioConfig:
    """``n`` parties in a chain: job-(i+1) serves job-i."""
    if n < 2:
        raise ConfigError("need at least two parties")
    doc: dict[str, Any] = {
        "platforms": [{"label": f"qeid{i}", "fmspc": "fmspc-a", "tcb_svn": 4} for i in range(1, n + 1)],
        "tcbs": [{"id": "tcb-a", "fmspc": "fmspc-a", "levels": {"4": "UpToDate", "3": "OutOfDate"}}],
        "out_of_date_tcbs": [{"id": "tcb-a-old", "fmspc": "fmspc-a", "levels": {"3": "OutOfDate"}}],
        "parties": [
            {
                "rpe": f"rpe-{i}", "rpe_platform": f"qeid{i}",
                "qeid_allowed": [f"qeid{i}"], "tcb_allowed": ["tcb-a"],
                "pe": f"pe-{i}", "pe_platform": f"qeid{i}", "job": f"job-{i}",
                "pe_qeid_allowed": [f"qeid{i}"], "out_of_tcb": ["tcb-a-old"],
                "pe_identity": {"mrenclave": f"pe-{i} enclave", "mrsigner": f"party {i} signer", "isvprodid": i, "isvsvn": 2},
                "pe_policy": {"mrenclave": "exact", "mrsigner": "exact", "isvprodid": "exact", "isvsvn_minimum": 1},
            }
            for i in range(1, n + 1)
        ],
        "connections": [{"server": f"job-{i + 1}", "clients": [f"job-{i}"]} for i in range(1, n)],
    }
    doc.update({k: v for k, v in overrides.items() if k != "attacks"})
    cfg = config_from_dict(doc)
    attacks = tuple(parse_attack(a) if isinstance(a, str) else a for a in overrides.get("attacks", ()))
    cfg = _replace(cfg, attacks=attacks)
    check_config(cfg)
    return cfg


def _replace(cfg: ScenarioConfig, **changes) -> ScenarioConfig:
    from dataclasses import replace

    return replace(cfg, **changes)


def with_changes(cfg: ScenarioConfig, **changes) -> ScenarioConfig:
    out = _replace(cfg, **changes)
    check_config(out)
    return out
