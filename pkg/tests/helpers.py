"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import fnmatch
import random

from ctxsec.dissemination import ContextEvent, PreferenceEntry, PreferenceSlice, RiskAssessment, risk_level
from ctxsec.reasoning import HighLevelContext

LABELS = ("at_home", "walking_near_home", "at_public_garden", "at_office", "unknown")
LABEL_PATTERNS = ("*", "at_*", "walking_*", "*_home") + LABELS

ACTION_DOCS = {
    "authenticate": lambda r: {"factors": r.choice([1, 2])},
    "renew_session_key": lambda r: {"target": "$source"},
    "establish_secure_channel": lambda r: {"peers": ["$source", "$requester"]},
    "apply_privacy": lambda r: {"attribute": "glucose", "transform": {"kind": "generalize", "width": 10}},
    "check_token": lambda r: {"token": "$token"},
    "notify_user": lambda r: {"message": "m"},
}


def make_event(label, score, min_factors=0, privacy=None, user="bob", seq=1):
    entry = PreferenceEntry(privacy or {}, min_factors)
    return ContextEvent(
        seq, user, HighLevelContext(label, 0.9, frozenset(), 0),
        RiskAssessment(score, risk_level(score), frozenset()),
        PreferenceSlice(user, label, "default", entry),
    )


def random_action(rng: random.Random) -> dict:
    kind = rng.choice(sorted(ACTION_DOCS))
    return {"kind": kind, "params": ACTION_DOCS[kind](rng)}


def random_policy_doc(rng: random.Random, pid: str) -> dict:
    match: dict = {}
    if rng.random() < 0.7:
        match["label"] = rng.choice(LABEL_PATTERNS)
    if rng.random() < 0.6:
        # coarse grid so boundaries and duplicates are common
        lo, hi = sorted(rng.choice([0.0, 0.25, 0.5, 0.75, 1.0]) for _ in range(2))
        match["risk"] = [lo, hi]
    if rng.random() < 0.3:
        match["prefs"] = [{"key": "min_factors", "op": rng.choice(["eq", "ge", "le"]), "value": rng.randint(0, 2)}]
    return {
        "id": pid,
        "priority": rng.randint(0, 5),
        "match": match,
        "actions": [random_action(rng) for _ in range(rng.randint(1, 3))],
    }


def brute_force_select(docs: list[dict], label: str, score: float, min_factors: int) -> str:
    """Scan every policy document, keep the accepting ones, sort, take the head."""
    def accepts(m: dict) -> bool:
        pattern = m.get("label", "*")
        if pattern != "*" and not fnmatch.fnmatchcase(label, pattern):
            return False
        if "risk" in m and not (m["risk"][0] <= score <= m["risk"][1]):
            return False
        for c in m.get("prefs", []):
            v, op = c["value"], c.get("op", "eq")
            if op == "eq" and not min_factors == v:
                return False
            if op == "ge" and not min_factors >= v:
                return False
            if op == "le" and not min_factors <= v:
                return False
        return True

    def specificity(m: dict) -> int:
        return (
            (m.get("label", "*") != "*")
            + ("risk" in m and list(m["risk"]) != [0.0, 1.0])
            + bool(m.get("prefs"))
        )

    accepting = [d for d in docs if d["id"] != "default" and accepts(d["match"])]
    if not accepting:
        return "default"
    accepting.sort(key=lambda d: d["id"])
    accepting.sort(key=lambda d: d["priority"], reverse=True)
    accepting.sort(key=lambda d: specificity(d["match"]), reverse=True)
    return accepting[0]["id"]


def ordering_violations(kinds: list[str], constraints) -> int:
    """Count (earlier, later) pairs where a 'later' kind precedes an 'earlier' kind."""
    bad = 0
    for before, after in constraints:
        for i, k in enumerate(kinds):
            if k == after and before in kinds[i + 1:]:
                bad += 1
    return bad
