"""Deterministic replay of a scenario through the pipeline."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

from ..encoding import canonical_json
from ..errors import ContextSecurityError
from ..policy import AccessRequest
from .pipeline import Pipeline, TraceRecord
from .scenario import Scenario, ScenarioEvent

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    pipeline: Pipeline
    trace: list[TraceRecord]

    def trace_jsonl(self) -> str:
        return "".join(canonical_json(r.to_json()).decode("utf-8") + "\n" for r in self.trace)

    def ledger_jsonl(self) -> str:
        return self.pipeline.trust.to_jsonl()

    def labels(self) -> list[str]:
        return [r.payload["label"] for r in self.trace if r.stage == "infer" and r.outcome == "stored"]


def _apply(pipeline: Pipeline, event: ScenarioEvent) -> None:
    d = event.data
    t = event.t
    if event.kind == "device_report":
        report = pipeline.make_report(
            d["device"], d["attribute"], d["value"], int(d.get("observed_at", t)),
            sequence=d.get("sequence"), forge=bool(d.get("forged", False)),
        )
        pipeline.submit_report(report, t)
    elif event.kind == "user_action":
        action = d["action"]
        if action == "preference_change":
            pipeline.update_preferences(d["user"], d["delta"], t)
        elif action == "token_grant":
            pipeline.grant_token(d, t)
        elif action == "token_revoke":
            pipeline.revoke_token(d["token_id"], t)
        elif action == "ownership_transfer":
            pipeline.transfer_ownership(d["device"], d["new_owner"], d.get("signer"), t)
    elif event.kind == "app_request":
        request = AccessRequest(
            requester=d["requester"],
            resource=d["resource"],
            operation=d.get("operation", "read"),
            token=d.get("token"),
            factors=dict(d.get("factors", {})),
        )
        pipeline.request(d["user"], request, t)


def run(
    scenario: Scenario,
    seed: int | None = None,
    trace_path: str | Path | None = None,
    ledger_path: str | Path | None = None,
) -> RunResult:
    """Drive every event in simulated time and collect the trace.

    A reasoning cycle runs for the reporting device's owner once all
    reports sharing a timestamp are in, and for every user on
    ``advance_clock``.
    """
    pipeline = Pipeline(scenario, seed)
    events = scenario.events
    pending: set[str] = set()
    for i, event in enumerate(events):
        pipeline.tracer.now = event.t
        try:
            if event.kind == "device_report":
                try:
                    _apply(pipeline, event)
                    pending.add(pipeline._user_of(event.data["device"]))
                except ContextSecurityError as exc:
                    log.info("report rejected at t=%d: %s", event.t, exc)
            elif event.kind == "advance_clock":
                pending.update(pipeline.users)
            else:
                _apply(pipeline, event)
        except ContextSecurityError as exc:
            # user actions that violate a contract show up in the trace through the ledger
            log.info("%s at t=%d failed: %s", event.kind, event.t, exc)
        nxt = events[i + 1] if i + 1 < len(events) else None
        batch_continues = (
            nxt is not None and nxt.kind == "device_report" and event.kind == "device_report" and nxt.t == event.t
        )
        if pending and not batch_continues:
            for user in sorted(pending):
                if user in pipeline.users:
                    pipeline.reason(user, event.t)
            pending.clear()
    result = RunResult(pipeline, pipeline.trace)
    if trace_path is not None:
        Path(trace_path).write_text(result.trace_jsonl(), encoding="utf-8")
    if ledger_path is not None:
        Path(ledger_path).write_text(result.ledger_jsonl(), encoding="utf-8")
    return result
