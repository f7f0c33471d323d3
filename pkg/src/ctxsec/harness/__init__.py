from .pipeline import Pipeline, TraceRecord
from .runner import RunResult, run
from .scenario import Scenario, ScenarioEvent, load_scenario, parse_scenario
from .service import Service, build_service, serve

__all__ = [
    "Pipeline", "TraceRecord", "RunResult", "run", "Scenario", "ScenarioEvent",
    "load_scenario", "parse_scenario", "Service", "build_service", "serve",
]
