import json
import random
from dataclasses import replace
from pathlib import Path

import pytest

from sras.cli import main
from sras.errors import ConfigError
from sras.harness import (
    build_infrastructure,
    config_from_dict,
    expected_reasons,
    generate_policy,
    listing_config,
    load_config,
    mutate_policy,
    n_party_config,
    parse_attack,
    report_render,
    run_scenario,
)
from sras.harness.report import PHASE_ROWS
from sras.harness.scenario import new_session_id
from sras.policy import canonical_bytes, dump_policy, validate_policy

ROOT = Path(__file__).resolve().parent.parent
LISTING = ROOT / "configs" / "listing.json"

ATTACKS = [
    "forged-policy:rpe-1",
    "forged-policy:rpe-2:random",
    "policy-replay:rpe-2",
    "evidence-tamper:rpe-2:RpeEvidence:40",
    "evidence-tamper:rpe-2:PeEvidence:7",
    "evidence-tamper:rpe-1:Announcement:30",
    "evidence-replay:rpe-1:RpeEvidence",
    "evidence-replay:rpe-2:PeEvidence",
    "evidence-replay:rpe-2:Announcement",
    "rogue-qeid:rpe-2:rpe",
    "rogue-qeid:pe-1:pe",
    "stale-tcb:pe-1",
    "wrong-measurement:rpe-1:rpe",
    "wrong-measurement:pe-2:pe",
]


def test_honest_listing_run():
    report = run_scenario(listing_config(seed=1))
    assert report.ok and report.all_ready and report.all_connected
    assert not report.detections
    assert [(c.server, c.client) for c in report.connections] == [("job-2", "job-1")]
    assert report.collaborative_ms() is not None


def test_same_seed_is_deterministic():
    a = run_scenario(listing_config(seed=9))
    b = run_scenario(listing_config(seed=9))
    assert a.session_id == b.session_id
    assert a.board_fingerprint == b.board_fingerprint
    assert [(p.rpe, p.status) for p in a.parties] == [(p.rpe, p.status) for p in b.parties]


def test_different_seeds_differ():
    assert run_scenario(listing_config(seed=1)).session_id != run_scenario(listing_config(seed=2)).session_id


@pytest.mark.parametrize("n", [2, 3, 5])
def test_n_parties(n):
    report = run_scenario(n_party_config(n, seed=n))
    assert report.ok and len(report.parties) == n


@pytest.mark.parametrize("spec", ATTACKS)
def test_attack_detected(spec):
    report = run_scenario(listing_config(seed=3, attacks=(parse_attack(spec),)))
    assert report.ok, report.attack_results
    assert not report.all_connected  # an attacked session never reaches collaboration


def test_forged_session_id_seen_at_mutual_attestation():
    report = run_scenario(listing_config(seed=4, attacks=(parse_attack("forged-policy:rpe-2"),)))
    hits = [d for d in report.detections if d.reason == "PolicyMismatch"]
    assert hits and all(d.phase == "Mutual Attestation" for d in hits)


def test_tampered_pe_evidence_blocks_connection():
    report = run_scenario(listing_config(seed=4, attacks=(parse_attack("evidence-tamper:rpe-2:PeEvidence:7"),)))
    assert any(d.party == "rpe-1" and d.reason == "BadSignature" for d in report.detections)
    assert not any(c.established for c in report.connections)


def test_tcp_transport():
    report = run_scenario(listing_config(seed=5, transport="tcp"))
    assert report.ok and report.transport == "tcp"


def test_generated_policy_is_valid_and_fresh():
    cfg = listing_config(seed=1)
    infra = build_infrastructure(cfg)
    a = generate_policy(cfg, infra)
    b = generate_policy(cfg, infra)
    validate_policy(a)
    assert a.session_id != b.session_id
    assert replace(a, session_id=b.session_id) == b


def test_mutation_changes_the_canonical_form():
    cfg = listing_config(seed=1)
    policy = generate_policy(cfg, build_infrastructure(cfg), new_session_id(random.Random(1)))
    rng = random.Random(2)
    for _ in range(50):
        forged, path = mutate_policy(policy, rng, "random")
        assert canonical_bytes(forged) != canonical_bytes(policy), path


def test_expected_reasons():
    assert expected_reasons(parse_attack("stale-tcb:pe-1")) == {"TcbOutOfDate"}
    assert expected_reasons(parse_attack("wrong-measurement:pe-1:pe")) == {"IdentityMismatch"}
    assert "BadSignature" in expected_reasons(parse_attack("evidence-tamper:rpe-1:PeEvidence:3"))


@pytest.mark.parametrize("spec", ["nope:rpe-1", "stale-tcb", "evidence-tamper:rpe-1:Foo:1",
                                  "evidence-tamper:rpe-1:PeEvidence:x", "rogue-qeid:rpe-1:xx",
                                  "forged-policy:rpe-1:bogus"])
def test_bad_attack_specs(spec):
    with pytest.raises(ConfigError):
        parse_attack(spec)


def test_attack_strings_round_trip():
    for spec in ATTACKS:
        assert parse_attack(str(parse_attack(spec))) == parse_attack(spec)


def test_render_has_four_phase_rows():
    text = report_render(run_scenario(listing_config(seed=1)))
    assert len(PHASE_ROWS) == 4
    for row in PHASE_ROWS:
        assert sum(line.startswith(row) for line in text.splitlines()) == 1


def test_latency_rows():
    report = run_scenario(listing_config(seed=1))
    lat = report.latency()
    assert list(lat) == list(PHASE_ROWS[:3])
    assert all(v.total_ms is not None and v.total_ms >= 0 for v in lat.values())


def test_shipped_configs_load():
    for path in (ROOT / "configs").glob("*.json"):
        assert load_config(path).parties


def test_config_errors(tmp_path):
    doc = json.loads(LISTING.read_text())
    bad = dict(doc, parties=[dict(doc["parties"][0], rpe_platform="nowhere")])
    with pytest.raises(ConfigError):
        config_from_dict(bad)
    with pytest.raises(ConfigError):
        config_from_dict({"platforms": []})
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


def test_policy_file_is_used(tmp_path):
    cfg = load_config(LISTING)
    policy = generate_policy(cfg, build_infrastructure(cfg), "fixed-session")
    (tmp_path / "policy.json").write_text(dump_policy(policy))
    doc = json.loads(LISTING.read_text())
    doc["policy"] = "policy.json"
    (tmp_path / "cfg.json").write_text(json.dumps(doc))
    report = run_scenario(load_config(tmp_path / "cfg.json"))
    assert report.ok and report.session_id == "fixed-session"


# -- CLI --------------------------------------------------------------------


def test_cli_run(capsys, tmp_path):
    out = tmp_path / "report.json"
    assert main(["run", "--config", str(LISTING), "--report", str(out)]) == 0
    assert "Mutual Attestation" in capsys.readouterr().out
    doc = json.loads(out.read_text())
    assert doc["ok"] and len(doc["latency"]) == 4


def test_cli_attack_detected_is_exit_zero():
    assert main(["run", "--config", str(LISTING), "--attack", "stale-tcb:pe-1", "--timeout", "3"]) == 0


def test_cli_gen_policy(capsys):
    assert main(["gen-policy", "--config", str(LISTING), "--seed", "3"]) == 0
    first = capsys.readouterr().out
    assert main(["gen-policy", "--config", str(LISTING), "--seed", "3"]) == 0
    assert capsys.readouterr().out == first
    assert json.loads(first)["Session ID"]


def test_cli_bad_config(tmp_path, capsys):
    path = tmp_path / "x.json"
    path.write_text("[]")
    assert main(["run", "--config", str(path)]) == 2
    assert main(["run", "--config", str(LISTING), "--attack", "bogus:x"]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_tcp(capsys):
    assert main(["run", "--config", str(LISTING), "--transport", "tcp"]) == 0
