"""Wires every stage into one context-to-enforcement pipeline."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Mapping

from .. import qoc
from ..crypto import KeyPair, derive_keypair
from ..dissemination import (
    ContextDispatcher,
    ContextEvent,
    PreferenceSet,
    PreferenceStore,
    load_catalog,
)
from ..errors import ContextSecurityError, UnknownDevice, UnknownUser
from ..ingestion import (
    DEFAULT_CLOCK_SKEW_MS,
    ContextAcquisition,
    ContextReport,
    LowLevelContext,
    NormalizationTables,
)
from ..mechanisms import Mechanisms
from ..policy import (
    AccessRequest,
    EnforcementContext,
    EnforcementPlan,
    EnforcementTrace,
    Enforcer,
    PolicyBase,
    compose_plan,
    select_policy,
)
from ..reasoning import (
    Classifier,
    ContextBase,
    ContextSnapshot,
    HighLevelContext,
    build_snapshot,
    commit_hlc,
    infer,
)
from ..trust import DEFAULT_ALPHA, DEFAULT_CHECKPOINT_EVERY, LedgerBlock, TrustLedger, transfer_message
from .scenario import Scenario

log = logging.getLogger(__name__)

STAGES = ("ingest", "qoc", "infer", "risk", "publish", "select", "plan", "enforce-step", "ledger")


def _clean(obj: Any) -> Any:
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(_clean(v) for v in obj)
    if isinstance(obj, bytes):
        return obj.hex()
    return obj


@dataclass(frozen=True)
class TraceRecord:
    t: int
    stage: str
    payload: dict
    outcome: str

    def to_json(self) -> dict:
        return {"t": self.t, "stage": self.stage, "payload": self.payload, "outcome": self.outcome}


class Tracer:
    def __init__(self):
        self.records: list[TraceRecord] = []
        self.now = 0

    def emit(self, stage: str, payload: Mapping, outcome: str, t: int | None = None) -> TraceRecord:
        assert stage in STAGES, stage
        record = TraceRecord(self.now if t is None else t, stage, _clean(dict(payload)), outcome)
        self.records.append(record)
        return record


@dataclass
class UserState:
    cb: ContextBase = field(default_factory=ContextBase)
    plan: EnforcementPlan | None = None
    event: ContextEvent | None = None


class Pipeline:
    """One service instance: all module state plus the trace it emits."""

    def __init__(self, scenario: Scenario, seed: int | None = None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        cfg = scenario.config
        self.tracer = Tracer()
        self.lock = threading.RLock()
        self.required_keys = tuple(cfg.get("required_keys", ("location", "motion", "network", "time_of_day")))
        self.threshold = float(cfg.get("qoc_threshold", qoc.DEFAULT_THRESHOLD))

        self.trust = TrustLedger(
            alpha=float(cfg.get("reputation_alpha", DEFAULT_ALPHA)),
            checkpoint_every=int(cfg.get("checkpoint_every", DEFAULT_CHECKPOINT_EVERY)),
            genesis_timestamp=scenario.start,
        )
        self.trust.subscribe(self._on_block)
        self.keys: dict[str, KeyPair] = {}
        self.acquisition = ContextAcquisition(
            self.trust,
            NormalizationTables(scenario.normalization),
            clock_skew_ms=int(cfg.get("clock_skew_ms", DEFAULT_CLOCK_SKEW_MS)),
        )
        self.key_configs = qoc.load_key_configs(scenario.qoc)
        self.classifier = Classifier.from_json(scenario.rules)
        self.dispatcher = ContextDispatcher(
            load_catalog(scenario.threats),
            PreferenceStore(PreferenceSet.from_json(p) for p in scenario.preferences),
        )
        # the policy manager is the dispatcher's main consumer
        self.cspm_inbox = self.dispatcher.broker.subscribe("*")
        self.policies = PolicyBase.from_documents(scenario.policies)
        self.mechanisms = Mechanisms(self.trust, self.seed)
        self.enforcer = Enforcer(self.mechanisms)
        self.users: dict[str, UserState] = {}
        self._sequences: dict[str, int] = {}

        at = scenario.start
        self.tracer.now = at
        for user in scenario.users:
            uid = user["id"]
            self.keys[uid] = derive_keypair(self.seed, uid)
            self.trust.register_owner(uid, self.keys[uid].public_key, at)
            if user.get("credentials"):
                self.mechanisms.authn.enroll(uid, user["credentials"])
            if uid not in self.dispatcher.preferences:
                self.dispatcher.preferences.register(PreferenceSet(uid))
            self.users[uid] = UserState()
        for device in scenario.devices:
            did = device["id"]
            kp = derive_keypair(self.seed, did)
            self.keys[did] = kp
            self.trust.register_device(device["owner"], kp.public_key, did, kp.agreement_public_key, at)
            self.mechanisms.comm.add_agreement_key(did, kp.agreement)

    # -- plumbing ---------------------------------------------------------

    @property
    def trace(self) -> list[TraceRecord]:
        return self.tracer.records

    def _on_block(self, block: LedgerBlock) -> None:
        entry = {k: v for k, v in block.entry.items() if k not in ("public_key", "agreement_key", "signature")}
        self.tracer.emit("ledger", {"index": block.index, "hash": block.hash.hex()[:16], "entry": entry}, "appended")

    def _user_of(self, device_id: str) -> str:
        return self.trust.device(device_id).owner

    def _devices_of(self, user_id: str) -> set[str]:
        return {d for d, r in self.trust.devices.items() if r.owner == user_id}

    def _state(self, user_id: str) -> UserState:
        if user_id not in self.users:
            if user_id not in self.dispatcher.preferences:
                raise UnknownUser(user_id)
            self.users[user_id] = UserState()
        return self.users[user_id]

    def key_config(self, key: str) -> qoc.KeyConfig:
        return self.key_configs.get(key) or qoc.KeyConfig(key, lifetime_ms=60_000)

    def make_report(self, device_id: str, attribute: str, value: Any, observed_at: int,
                    sequence: int | None = None, forge: bool = False) -> ContextReport:
        """Signed report as the simulated device would send it."""
        if device_id not in self.keys:
            raise UnknownDevice(device_id)
        if sequence is None:
            sequence = self._sequences.get(device_id, 0) + 1
        self._sequences[device_id] = max(self._sequences.get(device_id, 0), sequence)
        report = ContextReport(device_id, attribute, value, observed_at, sequence)
        signer = derive_keypair(f"forged-{self.seed}", device_id) if forge else self.keys[device_id]
        return report.signed_by(signer)

    # -- stages -------------------------------------------------------------

    def submit_report(self, report: ContextReport, now: int) -> LowLevelContext:
        with self.lock:
            self.tracer.now = now
            summary = {"device": report.device_id, "attribute": report.attribute,
                       "raw": report.raw_value, "sequence": report.sequence}
            try:
                record = self.acquisition.ingest_report(report, now)
            except ContextSecurityError as exc:
                self.tracer.emit("ingest", summary, f"rejected:{type(exc).__name__}")
                raise
            self.tracer.emit("ingest", {**summary, "value": record.value, "unit": record.unit}, "accepted")
            vector = qoc.score(record, now, self.key_config(record.key), self.trust.reputation(record.source))
            reputation = self.trust.update_reputation(record.source, vector.mean(), now)
            self.tracer.emit(
                "qoc",
                {"record": record.key, "source": record.source, "qoc": vector.as_dict(), "reputation": reputation},
                "scored",
            )
            return record

    def reason(self, user_id: str, t: int) -> HighLevelContext | None:
        """One CM -> CRP -> QoC validation -> CB cycle for ``user_id`` at ``t``."""
        with self.lock:
            self.tracer.now = t
            state = self._state(user_id)
            snapshot = build_snapshot(
                self.acquisition.cib, t, self.required_keys, self.key_configs,
                reputation=self.trust.reputation, sources=self._devices_of(user_id),
            )
            self.tracer.emit(
                "qoc",
                {
                    "user": user_id,
                    "snapshot": {k: e.value for k, e in sorted(snapshot.entries.items())},
                    "sources": {k: e.source for k, e in sorted(snapshot.entries.items())},
                    "completeness": snapshot.completeness,
                    "conflicts": snapshot.conflicts,
                },
                "snapshot",
            )
            hlc = infer(snapshot, self.classifier)
            vectors = [
                qoc.QoCVector(
                    e.qoc.timeliness, e.qoc.reliability, snapshot.completeness, e.qoc.importance
                )
                for k, e in sorted(snapshot.entries.items())
                if k in hlc.contributing
            ]
            accepted = qoc.validate_hlc(hlc, vectors, self.threshold)
            current = state.cb.current
            if accepted and current is not None and current.label == hlc.label:
                self.tracer.emit("infer", {"user": user_id, **hlc.summary()}, "unchanged")
                return None
            outcome = commit_hlc(state.cb, hlc, accepted)
            self.tracer.emit("infer", {"user": user_id, **hlc.summary()}, outcome)
            if outcome != "stored":
                return None
            self._disseminate(user_id, hlc, snapshot)
            return hlc

    def _disseminate(self, user_id: str, hlc: HighLevelContext, snapshot: ContextSnapshot) -> None:
        event = self.dispatcher.enrich(user_id, hlc, snapshot)
        self.tracer.emit("risk", {"user": user_id, "label": hlc.label, **event.risk.summary()}, event.risk.level)
        self.tracer.emit("publish", event.to_json(), "published")
        self.dispatcher.current[user_id] = event
        self.dispatcher.broker.publish(event)
        self._drain_policy_inbox()

    def _drain_policy_inbox(self) -> None:
        for event in self.cspm_inbox.drain():
            state = self._state(event.user_id)
            csp = select_policy(event, self.policies)
            self.tracer.emit(
                "select",
                {"user": event.user_id, "event_seq": event.seq, "label": event.label,
                 "risk": event.risk.level, "policy": csp.id},
                csp.id,
            )
            plan = compose_plan(csp, event)
            self.tracer.emit("plan", plan.summary(), "composed")
            state.event, state.plan = event, plan

    def update_preferences(self, user_id: str, delta: Mapping[str, Mapping], now: int) -> PreferenceSet:
        with self.lock:
            self.tracer.now = now
            prefs, event = self.dispatcher.update_preferences(user_id, delta)
            if event is not None:
                self.tracer.emit("publish", event.to_json(), "republished")
                self._drain_policy_inbox()
            return prefs

    def request(self, user_id: str, request: AccessRequest, now: int) -> EnforcementTrace | None:
        with self.lock:
            self.tracer.now = now
            state = self._state(user_id)
            base = {"user": user_id, "requester": request.requester, "resource": request.resource}
            if state.plan is None or state.event is None:
                self.tracer.emit("enforce-step", {**base, "kind": "release", "reason": "no context"}, "deny")
                return None
            record = self._latest(user_id, request.resource, now)
            ctx = EnforcementContext(
                user_id=user_id,
                label=state.event.label,
                now=now,
                request=request,
                source=record.source if record else None,
                value=record.value if record else None,
            )
            if record is None:
                self.tracer.emit("enforce-step", {**base, "kind": "release", "reason": "no data"}, "deny")
                return None
            result = self.enforcer.enforce(state.plan, ctx)
            for step in result.steps:
                payload = {**base, "plan_seq": state.plan.event_seq, "policy": state.plan.policy_id, **step.to_json()}
                if step.kind == "release":
                    payload["released"] = result.released
                    outcome = result.release
                else:
                    outcome = "ok" if step.ok else "fail"
                self.tracer.emit("enforce-step", payload, outcome)
            return result

    def _latest(self, user_id: str, key: str, now: int) -> LowLevelContext | None:
        owned = self._devices_of(user_id)
        records = [r for r in self.acquisition.cib.query(key, -(2**62), now) if r.source in owned]
        return records[-1] if records else None

    # -- user actions ---------------------------------------------------------

    def grant_token(self, data: Mapping, now: int):
        with self.lock:
            self.tracer.now = now
            return self.mechanisms.authz.grant_token(
                subject=data["subject"],
                resource=data["resource"],
                operations=data.get("operations", ["read"]),
                constraint=data.get("constraint", "*"),
                expiry=int(data.get("expiry", now + 86_400_000)),
                token_id=data.get("token_id"),
                at=now,
            )

    def revoke_token(self, token_id: str, now: int):
        with self.lock:
            self.tracer.now = now
            return self.mechanisms.authz.revoke_token(token_id, now)

    def transfer_ownership(self, device_id: str, new_owner: str, signer: str | None, now: int):
        with self.lock:
            self.tracer.now = now
            record = self.trust.device(device_id)
            signer = signer or record.owner
            msg = transfer_message(device_id, record.owner, new_owner, record.transfers)
            signature = self.keys[signer].sign(msg)
            return self.trust.transfer_ownership(device_id, new_owner, signature, now)
