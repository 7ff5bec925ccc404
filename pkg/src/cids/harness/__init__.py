from cids.harness.config import ConfigError, ScenarioSpec, load_scenario, scenario_from_dict
from cids.harness.runner import (InvariantViolation, MetricsReport, RunResult, replay,
                                 run_scenario)
from cids.harness.scoring import Score, ScoringError, score

__all__ = [
    "ConfigError", "InvariantViolation", "MetricsReport", "RunResult", "Score",
    "ScenarioSpec", "ScoringError", "load_scenario", "replay", "run_scenario",
    "scenario_from_dict", "score",
]
