import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from shapely.geometry import Point, Polygon

from ctxsec.errors import (
    BadSignature,
    ClockSkewExceeded,
    InvalidWindow,
    ReplayedSequence,
    UnknownDevice,
    UnnormalizableValue,
)
from ctxsec.ingestion import (
    ContextAcquisition,
    ContextInformationBase,
    ContextReport,
    LowLevelContext,
    NormalizationTables,
    point_in_polygon,
    query_cib,
)

HOME = [[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]
GARDEN = [[2.0, 2.0], [2.0, 3.0], [3.5, 3.5], [3.0, 2.0]]

TABLES = {
    "location": {"type": "geofence", "fences": [{"name": "home", "polygon": HOME},
                                                {"name": "public_garden", "polygon": GARDEN}]},
    "network": {"type": "ssid", "ssids": {"HomeNet": "trusted", "CityFree": "open"},
                "classes": {"trusted": "home_wifi", "open": "public_wifi"}},
    "motion": {"type": "threshold", "unit": "m/s", "bands": [[0.5, "still"], [2.5, "walking"], [None, "vehicle"]]},
    "time_of_day": {"type": "period", "bands": [[0, 12, "morning"], [12, 24, "afternoon"]]},
    "glucose": {"type": "numeric", "unit": "mg/dL", "range": [20, 600]},
}


@pytest.fixture
def tables():
    return NormalizationTables(TABLES)


@pytest.fixture
def acquisition(registered, tables):
    return ContextAcquisition(registered, tables)


def _signed(keys, device, attribute, raw, at, seq):
    return ContextReport(device, attribute, raw, at, seq).signed_by(keys[device])


def test_gps_inside_home(acquisition, keys):
    llc = acquisition.ingest_report(_signed(keys, "dev-a", "location", [0.5, 0.5], 1000, 1), 1000)
    assert (llc.key, llc.value, llc.source) == ("location", "home", "dev-a")
    assert len(acquisition.cib) == 1


def test_unregistered_device(acquisition, keys):
    with pytest.raises(UnknownDevice):
        acquisition.ingest_report(_signed(keys, "dev-c", "location", [0.5, 0.5], 1000, 1), 1000)


def test_identical_sequence_replayed(acquisition, keys):
    report = _signed(keys, "dev-a", "motion", 0.0, 1000, 3)
    acquisition.ingest_report(report, 1000)
    with pytest.raises(ReplayedSequence):
        acquisition.ingest_report(report, 1000)
    assert len(acquisition.cib) == 1


def test_bad_signature(acquisition, keys):
    forged = ContextReport("dev-a", "motion", 0.0, 1000, 1).signed_by(keys["dev-b"])
    with pytest.raises(BadSignature):
        acquisition.ingest_report(forged, 1000)


def test_clock_skew(acquisition, keys):
    with pytest.raises(ClockSkewExceeded):
        acquisition.ingest_report(_signed(keys, "dev-a", "motion", 0.0, 7000, 1), 1000)


def test_rejected_report_does_not_consume_sequence(acquisition, keys):
    with pytest.raises(UnnormalizableValue):
        acquisition.ingest_report(_signed(keys, "dev-a", "network", "Nope", 1000, 1), 1000)
    acquisition.ingest_report(_signed(keys, "dev-a", "network", "HomeNet", 1000, 1), 1000)
    assert len(acquisition.cib) == 1


def test_ssid_open_is_public_wifi(tables):
    expected = TABLES["network"]["classes"][TABLES["network"]["ssids"]["CityFree"]]
    assert tables.normalize("network", "CityFree") == expected == "public_wifi"


def test_zero_speed_still(tables):
    assert tables.normalize("motion", 0.0) == "still"


def test_outside_all_fences(tables):
    assert tables.normalize("location", [50.0, 50.0]) == "outdoor_unmapped"


@pytest.mark.parametrize("attribute,raw", [
    ("location", [95.0, 0.0]),
    ("motion", -1.0),
    ("motion", float("nan")),
    ("glucose", 900),
    ("glucose", "high"),
    ("time_of_day", 25),
    ("pressure", 3),
])
def test_unnormalizable(tables, attribute, raw):
    with pytest.raises(UnnormalizableValue):
        tables.normalize(attribute, raw)


def test_period_accepts_clock_string(tables):
    assert tables.normalize("time_of_day", "13:30") == "afternoon"


def test_vocabulary(tables):
    assert tables.vocabulary("location") == {"home", "public_garden", "outdoor_unmapped"}
    assert tables.vocabulary("glucose") is None


def _shapely_fence(lat, lon):
    # oracle: shapely, with (x, y) = (lon, lat); boundary counts as inside
    pt = Point(lon, lat)
    for fence in TABLES["location"]["fences"]:
        poly = Polygon([(x, y) for y, x in fence["polygon"]])
        if poly.covers(pt):
            return fence["name"]
    return "outdoor_unmapped"


@settings(max_examples=500, deadline=None)
@given(st.floats(-1, 4, allow_nan=False), st.floats(-1, 4, allow_nan=False))
def test_geofence_matches_shapely(lat, lon):
    assert NormalizationTables(TABLES).normalize("location", [lat, lon]) == _shapely_fence(lat, lon)


@pytest.mark.parametrize("lat,lon", [(0.0, 0.5), (1.0, 1.0), (0.5, 0.0), (2.75, 2.75)])
def test_geofence_boundary_points(lat, lon):
    assert point_in_polygon(lat, lon, HOME) == Polygon([(x, y) for y, x in HOME]).covers(Point(lon, lat))


def _llc(key, at, source, value="v"):
    return LowLevelContext(key, value, None, at, source)


def test_query_empty():
    assert query_cib(ContextInformationBase(), "location", (0, 100)) == []


def test_query_boundary_inclusion():
    cib = ContextInformationBase()
    rec = _llc("location", 50, "d")
    cib.append(rec)
    assert query_cib(cib, "location", (50, 50)) == [rec]


def test_query_inverted_window():
    with pytest.raises(InvalidWindow):
        query_cib(ContextInformationBase(), "location", (10, 5))


def test_query_interleaved_merge():
    cib = ContextInformationBase()
    records = [_llc("motion", t, d, i) for i, (t, d) in enumerate([(40, "b"), (10, "a"), (30, "a"), (20, "b"), (30, "b")])]
    for r in records:
        cib.append(r)
    expected = sorted(records, key=lambda r: (r.observed_at, r.source))
    assert query_cib(cib, "motion", (0, 100)) == expected


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.sampled_from("xy"), st.integers(0, 50), st.sampled_from("abc")), max_size=40),
    st.integers(0, 50),
    st.integers(0, 50),
)
def test_query_matches_full_scan(rows, t0, t1):
    t0, t1 = min(t0, t1), max(t0, t1)
    cib = ContextInformationBase()
    records = [_llc(k, t, s, i) for i, (k, t, s) in enumerate(rows)]
    for r in records:
        cib.append(r)
    for key in "xy":
        # oracle: full scan plus stable sort
        expected = sorted((r for r in records if r.key == key and t0 <= r.observed_at <= t1),
                          key=lambda r: (r.observed_at, r.source))
        assert cib.query(key, t0, t1) == expected


def test_report_json_roundtrip(keys):
    report = _signed(keys, "dev-a", "location", [0.5, 0.5], 1000, 1)
    assert ContextReport.from_json(report.to_json()) == report
