"""Contextual security policies: storage, selection, plan composition, enforcement."""

from __future__ import annotations

import fnmatch
import heapq
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .encoding import canonical_json
from .errors import ContextSecurityError, CyclicConstraints, LintError
from .mechanisms import SUPPRESSED, Mechanisms, PrivacyTransform, ScheduledRelease

log = logging.getLogger(__name__)

DEFAULT_POLICY_ID = "default"

ACTION_PARAMS: dict[str, tuple[str, ...]] = {
    "authenticate": ("factors",),
    "renew_session_key": ("target",),
    "establish_secure_channel": ("peers",),
    "apply_privacy": ("attribute", "transform"),
    "check_token": ("token",),
    "notify_user": ("message",),
}

# (must run first, must run later)
DEFAULT_CONSTRAINTS: tuple[tuple[str, str], ...] = (
    ("authenticate", "check_token"),
    ("establish_secure_channel", "apply_privacy"),
)


@dataclass(frozen=True)
class MechanismAction:
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_json(cls, data: Mapping) -> "MechanismAction":
        return cls(data["kind"], dict(data.get("params", {})))


@dataclass(frozen=True)
class PolicyMatch:
    label: str = "*"
    risk: tuple[float, float] | None = None
    prefs: tuple[Mapping[str, Any], ...] | None = None

    def specificity(self) -> int:
        count = 0
        if self.label != "*":
            count += 1
        if self.risk is not None and tuple(self.risk) != (0.0, 1.0):
            count += 1
        if self.prefs:
            count += 1
        return count

    def accepts(self, label: str, risk_score: float, prefs: Mapping[str, Any]) -> bool:
        if self.label != "*" and not fnmatch.fnmatchcase(label, self.label):
            return False
        if self.risk is not None and not self.risk[0] <= risk_score <= self.risk[1]:
            return False
        if self.prefs and not all(_pref_holds(c, prefs) for c in self.prefs):
            return False
        return True


def _pref_lookup(prefs: Mapping[str, Any], dotted: str) -> Any:
    node: Any = prefs
    for part in dotted.split("."):
        if not isinstance(node, Mapping) or part not in node:
            return None
        node = node[part]
    return node


def _pref_holds(cond: Mapping[str, Any], prefs: Mapping[str, Any]) -> bool:
    actual = _pref_lookup(prefs, cond["key"])
    op, target = cond.get("op", "eq"), cond["value"]
    if op == "eq":
        return actual == target
    if actual is None:
        return False
    if op == "ge":
        return actual >= target
    if op == "le":
        return actual <= target
    if op == "in":
        return actual in target
    return False


@dataclass(frozen=True)
class ContextSecurityPolicy:
    id: str
    priority: int
    match: PolicyMatch
    actions: tuple[MechanismAction, ...]
    hold: bool = False
    fail_closed: bool = True

    def to_json(self) -> dict:
        match: dict[str, Any] = {"label": self.match.label}
        if self.match.risk is not None:
            match["risk"] = list(self.match.risk)
        if self.match.prefs:
            match["prefs"] = [dict(c) for c in self.match.prefs]
        doc = {
            "id": self.id,
            "priority": self.priority,
            "match": match,
            "actions": [a.to_json() for a in self.actions],
        }
        if self.hold:
            doc["hold"] = True
        if not self.fail_closed:
            doc["fail_closed"] = False
        return doc


def parse_policy(doc: Mapping, where: str = "policy") -> ContextSecurityPolicy:
    """Build and lint one policy document; raises :class:`LintError`."""
    if not isinstance(doc, Mapping):
        raise LintError("policy must be an object", where)
    for name in ("id", "actions"):
        if name not in doc:
            raise LintError(f"missing field {name!r}", where)
    if not isinstance(doc["id"], str) or not doc["id"]:
        raise LintError("id must be a non-empty string", f"{where}.id")
    priority = doc.get("priority", 0)
    if not isinstance(priority, int) or isinstance(priority, bool):
        raise LintError("priority must be an integer", f"{where}.priority")
    match_doc = doc.get("match", {})
    if not isinstance(match_doc, Mapping):
        raise LintError("match must be an object", f"{where}.match")
    risk = match_doc.get("risk")
    if risk is not None:
        if (
            not isinstance(risk, (list, tuple))
            or len(risk) != 2
            or not all(isinstance(r, (int, float)) and not isinstance(r, bool) for r in risk)
        ):
            raise LintError("risk must be [min, max]", f"{where}.match.risk")
        lo, hi = float(risk[0]), float(risk[1])
        if not (0.0 <= lo <= 1.0 and 0.0 <= hi <= 1.0):
            raise LintError("risk bounds must lie in [0, 1]", f"{where}.match.risk")
        if lo > hi:
            raise LintError(f"risk_min {lo} > risk_max {hi}", f"{where}.match.risk")
        risk = (lo, hi)
    prefs = match_doc.get("prefs")
    if prefs is not None:
        if isinstance(prefs, Mapping):
            prefs = [{"key": k, "op": "eq", "value": v} for k, v in prefs.items()]
        for i, cond in enumerate(prefs):
            if not isinstance(cond, Mapping) or "key" not in cond or "value" not in cond:
                raise LintError("preference condition needs key and value", f"{where}.match.prefs[{i}]")
            if cond.get("op", "eq") not in ("eq", "ge", "le", "in"):
                raise LintError(f"unknown op {cond.get('op')!r}", f"{where}.match.prefs[{i}].op")
        prefs = tuple(dict(c) for c in prefs)
    label = match_doc.get("label", "*")
    if not isinstance(label, str) or not label:
        raise LintError("label pattern must be a non-empty string", f"{where}.match.label")
    actions_doc = doc["actions"]
    if not isinstance(actions_doc, list) or not actions_doc:
        raise LintError("actions must be a non-empty list", f"{where}.actions")
    actions = []
    for i, a in enumerate(actions_doc):
        loc = f"{where}.actions[{i}]"
        if not isinstance(a, Mapping) or a.get("kind") not in ACTION_PARAMS:
            raise LintError(f"unknown action kind {a.get('kind') if isinstance(a, Mapping) else a!r}", loc)
        params = a.get("params", {})
        missing = [p for p in ACTION_PARAMS[a["kind"]] if p not in params]
        if missing:
            raise LintError(f"missing params {missing}", f"{loc}.params")
        if a["kind"] == "authenticate" and params["factors"] not in (1, 2):
            raise LintError("factors must be 1 or 2", f"{loc}.params.factors")
        if a["kind"] == "establish_secure_channel":
            peers = params["peers"]
            if not isinstance(peers, list) or len(peers) != 2:
                raise LintError("peers must be a pair", f"{loc}.params.peers")
        if a["kind"] == "apply_privacy":
            try:
                PrivacyTransform.from_json(params["transform"])
            except ContextSecurityError as exc:
                raise LintError(str(exc), f"{loc}.params.transform") from None
        actions.append(MechanismAction(a["kind"], dict(params)))
    return ContextSecurityPolicy(
        id=doc["id"],
        priority=priority,
        match=PolicyMatch(label, risk, prefs),
        actions=tuple(actions),
        hold=bool(doc.get("hold", False)),
        fail_closed=bool(doc.get("fail_closed", True)),
    )


def lint_documents(docs: Any, require_default: bool = False) -> list[ContextSecurityPolicy]:
    if isinstance(docs, Mapping):
        docs = [docs]
    if not isinstance(docs, list):
        raise LintError("expected a policy object or a list of policies")
    policies = []
    seen: dict[str, int] = {}
    for i, doc in enumerate(docs):
        policy = parse_policy(doc, f"policies[{i}]")
        if policy.id in seen:
            raise LintError(f"duplicate id {policy.id!r} (first at policies[{seen[policy.id]}])", f"policies[{i}].id")
        seen[policy.id] = i
        policies.append(policy)
    if require_default and DEFAULT_POLICY_ID not in seen:
        raise LintError(f"no {DEFAULT_POLICY_ID!r} policy")
    return policies


def lint_file(path: str | Path) -> list[ContextSecurityPolicy]:
    try:
        docs = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LintError(f"invalid JSON: {exc.msg}", f"line {exc.lineno} column {exc.colno}") from None
    return lint_documents(docs)


def default_policy() -> ContextSecurityPolicy:
    return parse_policy(
        {
            "id": DEFAULT_POLICY_ID,
            "priority": 0,
            "match": {"label": "*"},
            "hold": True,
            "actions": [{"kind": "notify_user", "params": {"message": "no policy for this context; data held"}}],
        },
        DEFAULT_POLICY_ID,
    )


class PolicyBase:
    """Policy store; mutations and selections are serialized."""

    def __init__(self, policies: Iterable[ContextSecurityPolicy] = ()):
        self._policies: dict[str, ContextSecurityPolicy] = {}
        self._lock = threading.RLock()
        for p in policies:
            if p.id in self._policies:
                raise LintError(f"duplicate id {p.id!r}", p.id)
            self._policies[p.id] = p
        if DEFAULT_POLICY_ID not in self._policies:
            self._policies[DEFAULT_POLICY_ID] = default_policy()

    @classmethod
    def from_documents(cls, docs: Any) -> "PolicyBase":
        return cls(lint_documents(docs))

    def __len__(self) -> int:
        return len(self._policies)

    def __iter__(self):
        return iter(sorted(self._policies.values(), key=lambda p: p.id))

    def get(self, policy_id: str) -> ContextSecurityPolicy:
        return self._policies[policy_id]

    @property
    def default(self) -> ContextSecurityPolicy:
        return self._policies[DEFAULT_POLICY_ID]

    def add(self, doc: Mapping | ContextSecurityPolicy) -> ContextSecurityPolicy:
        policy = doc if isinstance(doc, ContextSecurityPolicy) else parse_policy(doc)
        with self._lock:
            if policy.id in self._policies:
                raise LintError(f"duplicate id {policy.id!r}", "id")
            self._policies[policy.id] = policy
        return policy

    def update(self, doc: Mapping | ContextSecurityPolicy) -> ContextSecurityPolicy:
        policy = doc if isinstance(doc, ContextSecurityPolicy) else parse_policy(doc)
        with self._lock:
            if policy.id not in self._policies:
                raise LintError(f"no policy {policy.id!r} to update", "id")
            self._policies[policy.id] = policy
        return policy

    def remove(self, policy_id: str) -> None:
        with self._lock:
            if policy_id == DEFAULT_POLICY_ID:
                raise LintError("the default policy cannot be removed", "id")
            if policy_id not in self._policies:
                raise LintError(f"no policy {policy_id!r}", "id")
            del self._policies[policy_id]

    def lint(self, doc: Mapping) -> ContextSecurityPolicy:
        policy = parse_policy(doc)
        if policy.id in self._policies:
            raise LintError(f"duplicate id {policy.id!r}", "id")
        return policy

    def select(self, label: str, risk_score: float, prefs: Mapping[str, Any]) -> ContextSecurityPolicy:
        with self._lock:
            candidates = [
                p for pid, p in self._policies.items()
                if pid != DEFAULT_POLICY_ID and p.match.accepts(label, risk_score, prefs)
            ]
            if not candidates:
                return self._policies[DEFAULT_POLICY_ID]
            return min(candidates, key=lambda p: (-p.match.specificity(), -p.priority, p.id))


def select_policy(event, base: PolicyBase) -> ContextSecurityPolicy:
    return base.select(event.hlc.label, event.risk.score, event.preferences.entry.to_json())


# -- plans ------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanStep:
    kind: str
    params: Mapping[str, Any]

    def to_json(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


@dataclass(frozen=True)
class EnforcementPlan:
    event_seq: int
    policy_id: str
    steps: tuple[PlanStep, ...]
    hold: bool = False
    fail_closed: bool = True

    def kinds(self) -> list[str]:
        return [s.kind for s in self.steps]

    def summary(self) -> dict:
        return {
            "event_seq": self.event_seq,
            "policy": self.policy_id,
            "steps": [s.to_json() for s in self.steps],
            "hold": self.hold,
            "fail_closed": self.fail_closed,
        }


def order_actions(
    actions: Sequence[MechanismAction],
    constraints: Iterable[tuple[str, str]] = DEFAULT_CONSTRAINTS,
) -> list[MechanismAction]:
    """Stable topological sort: among ready actions, the earliest authored goes first."""
    n = len(actions)
    succ: list[set[int]] = [set() for _ in range(n)]
    indeg = [0] * n
    for before, after in constraints:
        for i, a in enumerate(actions):
            if a.kind != before:
                continue
            for j, b in enumerate(actions):
                if b.kind == after and i != j and j not in succ[i]:
                    succ[i].add(j)
                    indeg[j] += 1
    ready = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(ready)
    out = []
    while ready:
        i = heapq.heappop(ready)
        out.append(actions[i])
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(ready, j)
    if len(out) != n:
        raise CyclicConstraints("ordering constraints form a cycle over the policy actions")
    return out


def compose_plan(
    csp: ContextSecurityPolicy,
    event,
    constraints: Iterable[tuple[str, str]] = DEFAULT_CONSTRAINTS,
) -> EnforcementPlan:
    """Order the policy's actions and fold in the user's preferences.

    Preferences can only tighten a plan: a minimum factor count raises (or
    introduces) the authenticate step, and per-attribute privacy transforms
    replace or add apply_privacy steps.
    """
    prefs = event.preferences.entry
    actions = list(csp.actions)
    if prefs.min_factors:
        auth = [i for i, a in enumerate(actions) if a.kind == "authenticate"]
        if auth:
            for i in auth:
                factors = max(int(actions[i].params["factors"]), prefs.min_factors)
                actions[i] = MechanismAction("authenticate", {**actions[i].params, "factors": factors})
        else:
            actions.insert(0, MechanismAction("authenticate", {"factors": prefs.min_factors}))
    for attribute, transform in sorted(prefs.privacy.items()):
        idx = [i for i, a in enumerate(actions) if a.kind == "apply_privacy" and a.params["attribute"] == attribute]
        step = MechanismAction("apply_privacy", {"attribute": attribute, "transform": dict(transform)})
        if idx:
            for i in idx:
                actions[i] = step
        else:
            actions.append(step)
    ordered = order_actions(actions, constraints)
    steps = tuple(PlanStep(a.kind, _resolve_params(a.params, event)) for a in ordered)
    return EnforcementPlan(event.seq, csp.id, steps, csp.hold, csp.fail_closed)


def _resolve_params(params: Mapping[str, Any], event) -> dict:
    bindings = {"$user": event.user_id, "$label": event.hlc.label}

    def sub(v):
        if isinstance(v, str):
            return bindings.get(v, v)
        if isinstance(v, list):
            return [sub(x) for x in v]
        if isinstance(v, dict):
            return {k: sub(x) for k, x in v.items()}
        return v

    return {k: sub(v) for k, v in params.items()}


# -- enforcement --------------------------------------------------------------------


@dataclass(frozen=True)
class AccessRequest:
    """A pull of one resource by an application, plus what the user presents."""

    requester: str
    resource: str
    operation: str = "read"
    token: str | None = None
    factors: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class StepOutcome:
    index: int
    kind: str
    params: Mapping[str, Any]
    ok: bool
    detail: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"index": self.index, "kind": self.kind, "params": dict(self.params),
                "ok": self.ok, "detail": dict(self.detail)}


@dataclass
class EnforcementTrace:
    plan: EnforcementPlan
    steps: list[StepOutcome] = field(default_factory=list)
    failed_at: int | None = None
    release: str = "none"  # released | scheduled | deny | none
    released: dict[str, Any] = field(default_factory=dict)
    notifications: list[str] = field(default_factory=list)


@dataclass
class EnforcementContext:
    """Everything the enforcer needs beyond the plan itself."""

    user_id: str
    label: str
    now: int
    request: AccessRequest | None = None
    source: str | None = None  # device holding the requested data
    value: Any = None  # current value of the requested resource


class Enforcer:
    def __init__(self, mechanisms: Mechanisms):
        self.mech = mechanisms

    def _bind(self, value: Any, ctx: EnforcementContext) -> Any:
        req = ctx.request
        table = {
            "$user": ctx.user_id,
            "$source": ctx.source,
            "$requester": req.requester if req else None,
            "$token": req.token if req else None,
            "$resource": req.resource if req else None,
        }
        if isinstance(value, str) and value in table:
            return table[value]
        if isinstance(value, list):
            return [self._bind(v, ctx) for v in value]
        return value

    def enforce(self, plan: EnforcementPlan, ctx: EnforcementContext) -> EnforcementTrace:
        trace = EnforcementTrace(plan)
        transforms: dict[str, PrivacyTransform] = {}
        channel = None
        for i, step in enumerate(plan.steps):
            params = {k: self._bind(v, ctx) for k, v in step.params.items()}
            try:
                ok, detail, channel = self._run(step.kind, params, ctx, transforms, channel, trace)
            except ContextSecurityError as exc:
                ok, detail = False, {"error": type(exc).__name__, "message": str(exc)}
            trace.steps.append(StepOutcome(i, step.kind, params, ok, detail))
            if not ok:
                trace.failed_at = i
                if plan.fail_closed:
                    break
        if plan.hold or (trace.failed_at is not None and plan.fail_closed):
            trace.release = "deny"
            reason = "hold" if trace.failed_at is None else f"step {trace.failed_at} failed"
            trace.steps.append(StepOutcome(len(trace.steps), "release", {}, False, {"decision": "deny", "reason": reason}))
        elif ctx.request is not None:
            self._release(trace, ctx, transforms, channel)
        return trace

    def _run(self, kind, params, ctx, transforms, channel, trace):
        m = self.mech
        if kind == "authenticate":
            presented = ctx.request.factors if ctx.request else {}
            ok = m.authn.authenticate(ctx.user_id, int(params["factors"]), presented)
            return ok, {"subject": ctx.user_id, "presented": sorted(presented)}, channel
        if kind == "renew_session_key":
            key = m.comm.renew_session_key(params["target"], ctx.now)
            return True, {"device": key.device_id, "epoch": key.epoch}, channel
        if kind == "establish_secure_channel":
            a, b = params["peers"]
            if a is None or b is None:
                return False, {"error": "UnboundPeer"}, channel
            ch = m.comm.establish_channel(a, b, ctx.now)
            return True, {"channel_id": ch.channel_id, "peers": list(ch.peers)}, ch
        if kind == "apply_privacy":
            transforms[params["attribute"]] = PrivacyTransform.from_json(params["transform"])
            return True, {"attribute": params["attribute"], "transform": params["transform"]["kind"]}, channel
        if kind == "check_token":
            if params["token"] is None or ctx.request is None:
                return False, {"error": "NoToken"}, channel
            decision = m.authz.check_token(
                params["token"], ctx.label, ctx.now,
                operation=ctx.request.operation, resource=ctx.request.resource,
                subject=ctx.request.requester,
            )
            return decision.allow, {"decision": str(decision)}, channel
        if kind == "notify_user":
            trace.notifications.append(params["message"])
            return True, {"message": params["message"]}, channel
        raise ValueError(f"unknown action kind {kind!r}")

    def _release(self, trace: EnforcementTrace, ctx: EnforcementContext, transforms, channel) -> None:
        req = ctx.request
        value = ctx.value
        transform = transforms.get(req.resource)
        if transform is not None:
            value = self.mech.apply_privacy(value, transform, ctx.user_id, ctx.now)
        detail: dict[str, Any] = {"attribute": req.resource, "to": req.requester}
        if value is SUPPRESSED:
            trace.release = "released"
            trace.released = {}
            detail["suppressed"] = True
        elif isinstance(value, ScheduledRelease):
            trace.release = "scheduled"
            trace.released = {req.resource: value.value}
            detail["release_at"] = value.release_at
        else:
            trace.release = "released"
            trace.released = {req.resource: value}
        detail["transform"] = transform.kind if transform else None
        if channel is not None and trace.release != "deny":
            payload = canonical_json(trace.released)
            aad = canonical_json({"resource": req.resource, "to": req.requester})
            envelope = self.mech.comm.seal(channel, payload, aad)
            delivered = self.mech.comm.unseal(channel, envelope)
            detail["sealed"] = {"channel_id": channel.channel_id, "epoch": envelope.epoch,
                                "nonce": envelope.nonce.hex(), "verified": delivered == payload}
        else:
            detail["sealed"] = None
        trace.steps.append(StepOutcome(len(trace.steps), "release", {}, True, detail))
