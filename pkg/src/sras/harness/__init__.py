from .config import (
    AttackSpec,
    PartySpec,
    ScenarioConfig,
    config_from_dict,
    listing_config,
    load_config,
    n_party_config,
    parse_attack,
)
from .report import ScenarioReport, report_render
from .scenario import (
    Infrastructure,
    build_infrastructure,
    expected_reasons,
    generate_policy,
    mutate_policy,
    run_scenario,
)

__all__ = [
    "AttackSpec",
    "Infrastructure",
    "PartySpec",
    "ScenarioConfig",
    "ScenarioReport",
    "build_infrastructure",
    "config_from_dict",
    "expected_reasons",
    "generate_policy",
    "listing_config",
    "load_config",
    "mutate_policy",
    "n_party_config",
    "parse_attack",
    "report_render",
    "run_scenario",
]
