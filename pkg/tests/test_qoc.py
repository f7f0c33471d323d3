import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxsec.ingestion import LowLevelContext
from ctxsec.qoc import (
    ConflictPolicy,
    KeyConfig,
    QoCVector,
    detect_conflicts,
    resolve,
    score,
    timeliness,
    validate_hlc,
)
from ctxsec.reasoning import HighLevelContext

unit = st.floats(0, 1, allow_nan=False)


def _rec(value, at, source="s", rel=0.5, key="location"):
    return LowLevelContext(key, value, None, at, source, QoCVector(1.0, rel, 1.0, 1.0))


def _hlc(conf):
    return HighLevelContext("x", conf, frozenset(), 0)


def test_fresh_is_one():
    assert timeliness(0, 1000) == 1.0


@pytest.mark.parametrize("age", [1000, 1001, 10**9])
def test_expired_is_zero(age):
    assert timeliness(age, 1000) == 0.0


def test_thirty_seconds_of_two_minutes():
    assert abs(timeliness(30_000, 120_000) - (1 - 30 / 120)) < 1e-12


def test_score_components():
    config = KeyConfig("location", 120_000, 0.8)
    v = score(_rec("home", 0), 30_000, config, 0.6)
    assert v.as_dict() == pytest.approx({"timeliness": 0.75, "reliability": 0.6, "completeness": 1.0, "importance": 0.8})


@given(st.floats(0, 1e6), st.floats(0, 1e6), st.floats(1, 1e6))
def test_timeliness_non_increasing(a, b, lifetime):
    lo, hi = min(a, b), max(a, b)
    assert timeliness(hi, lifetime) <= timeliness(lo, lifetime)


def test_agreement_is_no_conflict():
    assert detect_conflicts([_rec("home", 0, "a"), _rec("home", 500, "b")], 10_000) == []


def test_one_second_apart_conflict():
    conflicts = detect_conflicts([_rec("home", 0, "a"), _rec("street", 1000, "b")], 10_000)
    assert len(conflicts) == 1 and len(conflicts[0]) == 2


def test_sixty_seconds_apart_no_conflict():
    assert detect_conflicts([_rec("home", 0, "a"), _rec("street", 60_000, "b")], 10_000) == []


def _pairwise_oracle(records, window):
    # oracle: explicit pairwise scan + BFS components
    edges = {i: set() for i in range(len(records))}
    for i, j in itertools.combinations(range(len(records)), 2):
        a, b = records[i], records[j]
        if abs(a.observed_at - b.observed_at) <= window and a.value != b.value:
            edges[i].add(j)
            edges[j].add(i)
    seen, groups = set(), []
    for i in range(len(records)):
        if i in seen or not edges[i]:
            continue
        stack, comp = [i], set()
        while stack:
            n = stack.pop()
            if n in comp:
                continue
            comp.add(n)
            stack.extend(edges[n])
        seen |= comp
        groups.append(sorted((records[k].observed_at, records[k].source, records[k].value) for k in comp))
    return sorted(groups)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["home", "street", "garden"]), st.integers(0, 60), st.sampled_from("abcd")),
                max_size=12), st.integers(0, 30))
def test_conflicts_match_pairwise_scan(rows, window):
    records = [_rec(v, t, s) for v, t, s in rows]
    got = sorted(sorted((r.observed_at, r.source, r.value) for r in c.records)
                 for c in detect_conflicts(records, window))
    assert got == _pairwise_oracle(records, window)


def test_up_to_dateness():
    assert resolve([_rec("street", 10), _rec("home", 12)], "up_to_dateness").value == "home"


def test_highest_reliability():
    chosen = resolve([_rec("street", 10, "a", 0.9), _rec("home", 12, "b", 0.3)], ConflictPolicy.HIGHEST_RELIABILITY)
    assert chosen.value == "street"


def test_weighted_vote():
    records = [_rec("A", 1, "a", 0.9), _rec("A", 2, "b", 0.2), _rec("B", 3, "c", 0.6)]
    # oracle: brute-force sum per value
    totals = {}
    for r in records:
        totals[r.value] = totals.get(r.value, 0) + r.qoc.reliability
    assert max(totals, key=totals.get) == "A"
    chosen = resolve(records, "weighted_vote")
    assert chosen.value == "A" and chosen.source == "a"


def test_singleton():
    rec = _rec("home", 5)
    for policy in ConflictPolicy:
        assert resolve([rec], policy) is rec


def test_empty_group_rejected():
    with pytest.raises(ValueError):
        resolve([], "up_to_dateness")


group = st.lists(
    st.builds(_rec, st.sampled_from(["A", "B", "C"]), st.integers(0, 5), st.sampled_from("abc"),
              st.sampled_from([0.1, 0.2, 0.3, 0.5, 0.7])),
    min_size=1, max_size=8,
)


@settings(max_examples=200, deadline=None)
@given(group, st.sampled_from(list(ConflictPolicy)), st.randoms(use_true_random=False))
def test_resolve_permutation_invariant_and_member(records, policy, rnd):
    chosen = resolve(records, policy)
    shuffled = list(records)
    rnd.shuffle(shuffled)
    assert resolve(shuffled, policy) == chosen
    assert chosen in records


def test_validate_all_ones():
    assert validate_hlc(_hlc(1.0), [QoCVector(1, 1, 1, 1)], 0.5)


@pytest.mark.parametrize("theta", [0.01, 0.5, 1.0])
def test_validate_zero_confidence(theta):
    assert not validate_hlc(_hlc(0.0), [QoCVector(1, 1, 1, 1)], theta)


def test_validate_product_below_threshold():
    vec = QoCVector(0.5, 0.5, 0.5, 0.5)
    assert math.isclose(0.8 * vec.mean(), 0.4)
    assert not validate_hlc(_hlc(0.8), [vec], 0.5)


@settings(max_examples=200)
@given(unit, unit, st.tuples(unit, unit, unit, unit), st.integers(0, 3), unit, unit)
def test_validate_monotone(c1, c2, comps, idx, bump, theta):
    lo_c, hi_c = min(c1, c2), max(c1, c2)
    vec = QoCVector(*comps)
    if validate_hlc(_hlc(lo_c), [vec], theta):
        assert validate_hlc(_hlc(hi_c), [vec], theta)
    raised = list(comps)
    raised[idx] = max(raised[idx], bump)
    if validate_hlc(_hlc(lo_c), [vec], theta):
        assert validate_hlc(_hlc(lo_c), [QoCVector(*raised)], theta)


def test_qoc_vector_range_checked():
    with pytest.raises(ValueError):
        QoCVector(1.2, 0, 0, 0)


def test_key_config_rejects_nonpositive_lifetime():
    with pytest.raises(ValueError):
        KeyConfig("k", 0)


def test_resolution_random_groups_deterministic():
    rng = random.Random(3)
    for _ in range(50):
        records = [_rec(rng.choice("AB"), rng.randint(0, 3), rng.choice("xyz"), rng.random()) for _ in range(5)]
        assert resolve(records, "weighted_vote") == resolve(list(reversed(records)), "weighted_vote")
