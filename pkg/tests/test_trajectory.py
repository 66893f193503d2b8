import io
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajsurprise.trajectory import (
    GeoPoint, SchemaError, StaypointRecord, Trajectory, TrajectoryError, dataset_from_records,
    derive_features, extract_staypoints, haversine_km, parse_dataset, parse_timestamp,
    poi_id_for, quantile_split_time, serialize_dataset, split_train_test,
)

HEADER = "UserId, Latitude, Longitude, CheckinTime, LeavingTime, VenueType\n"
TABLE1 = HEADER + (
    "153, 39.935892, 116.453081, 2009-06-21T03:03:01, 2009-06-21T03:38:57, Workplace\n"
    "153, 39.998524, 116.387211, 2009-06-21T03:38:59, 2009-06-21T04:08:00, Restaurant\n"
    "153, 39.991694, 116.389809, 2009-06-21T04:27:56, 2009-06-21T05:00:27, Recreational\n"
)


def cosine_law_km(a, b, r=6371.0088):
    """Spherical law of cosines; independent of the haversine form."""
    p1, p2 = math.radians(a.lat), math.radians(b.lat)
    dl = math.radians(b.lon - a.lon)
    c = math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(dl)
    return r * math.acos(max(-1.0, min(1.0, c)))


# -- parsing ------------------------------------------------------------------------

def test_table1_first_row_stay_seconds():
    ds = parse_dataset(TABLE1)
    first = ds.trajectories["153"].records[0]
    assert first.stay_seconds == 2156
    assert first.venue_type == "Workplace"
    assert first.location == GeoPoint(39.935892, 116.453081)


def test_header_names_are_case_insensitive():
    text = TABLE1.replace("UserId", "userid").replace("VenueType", "VENUETYPE")
    assert parse_dataset(text).n_records() == 3


def test_empty_body_gives_empty_dataset():
    ds = parse_dataset(HEADER)
    assert len(ds) == 0 and ds.n_records() == 0


def test_missing_column_is_schema_error():
    with pytest.raises(SchemaError):
        parse_dataset("UserId, Latitude, Longitude, CheckinTime, VenueType\n")


def test_rows_out_of_order_are_sorted():
    text = HEADER + (
        "7, 1.0, 1.0, 2020-01-02T00:00:00, 2020-01-02T01:00:00, Apartment\n"
        "7, 2.0, 2.0, 2020-01-01T00:00:00, 2020-01-01T01:00:00, Apartment\n"
    )
    recs = parse_dataset(text).trajectories["7"].records
    assert len(recs) == 2
    assert recs[0].checkin < recs[1].checkin


def test_malformed_rows_are_skipped_and_counted():
    text = HEADER + (
        "1, 10.0, 10.0, 2020-01-01T00:00:00, 2020-01-01T01:00:00, Apartment\n"
        "1, abc, 10.0, 2020-01-01T02:00:00, 2020-01-01T03:00:00, Apartment\n"
        "1, 10.0, 10.0, not-a-time, 2020-01-01T03:00:00, Apartment\n"
        "1, 10.0, 10.0, 2020-01-01T05:00:00, 2020-01-01T04:00:00, Apartment\n"
        "1, 95.0, 10.0, 2020-01-01T05:00:00, 2020-01-01T06:00:00, Apartment\n"
    )
    ds = parse_dataset(text)
    assert ds.n_records() == 1
    assert [i.line for i in ds.parse_issues] == [3, 4, 5, 6]


def test_custom_schema_and_delimiter():
    text = "uid;la;lo;cin;cout;kind\n9;1.5;2.5;2021-03-01T10:00:00Z;2021-03-01T11:00:00Z;Gym\n"
    schema = {"user_id": "uid", "lat": "la", "lon": "lo", "checkin": "cin",
              "leave": "cout", "venue_type": "kind"}
    ds = parse_dataset(text, schema, delimiter=";")
    assert ds.trajectories["9"].records[0].venue_type == "Gym"


def test_timestamps_are_utc():
    assert parse_timestamp("1970-01-01T00:00:00") == 0.0
    assert parse_timestamp("1970-01-01T01:00:00+01:00") == 0.0
    assert parse_timestamp("1970-01-01T00:00:10Z") == 10.0


def test_poi_id_rounds_to_five_decimals():
    assert poi_id_for(GeoPoint(1.000001, 2.0)) == poi_id_for(GeoPoint(1.0, 2.0))
    assert poi_id_for(GeoPoint(1.00001, 2.0)) != poi_id_for(GeoPoint(1.0, 2.0))


def test_record_invariants():
    with pytest.raises(TrajectoryError):
        StaypointRecord("u", GeoPoint(0, 0), 10.0, 5.0)
    with pytest.raises(TrajectoryError):
        GeoPoint(float("nan"), 0.0)
    with pytest.raises(TrajectoryError):
        GeoPoint(0.0, 181.0)


def test_trajectory_rejects_unsorted_and_foreign_records():
    a = StaypointRecord("u", GeoPoint(0, 0), 10.0, 20.0)
    b = StaypointRecord("u", GeoPoint(0, 0), 0.0, 5.0)
    with pytest.raises(TrajectoryError):
        Trajectory("u", (a, b))
    with pytest.raises(TrajectoryError):
        Trajectory("v", (b,))


# -- round trip and split -------------------------------------------------------------

coords = st.tuples(st.floats(-89, 89, allow_nan=False), st.floats(-179, 179, allow_nan=False))
record_st = st.builds(
    lambda u, c, t, d, v: StaypointRecord(u, GeoPoint(*c), float(t), float(t + d), v),
    st.sampled_from(["a", "b", "c"]), coords, st.integers(0, 10**9), st.integers(0, 10**5),
    st.sampled_from(["Apartment", "Workplace", "Restaurant"]),
)


def _multiset(records):
    return Counter((r.user_id, r.poi_id, r.checkin, r.leave, r.venue_type) for r in records)


@settings(max_examples=60, deadline=None)
@given(st.lists(record_st, max_size=30))
def test_parse_serialize_round_trip(records):
    ds = dataset_from_records(records)
    again = parse_dataset(serialize_dataset(ds))
    assert _multiset(again.records()) == _multiset(ds.records())
    assert {r.location for r in again.records()} == {r.location for r in ds.records()}


@settings(max_examples=100, deadline=None)
@given(st.lists(record_st, max_size=40), st.integers(0, 10**9))
def test_split_partition_law(records, t_split):
    ds = dataset_from_records(records)
    split = split_train_test(ds, t_split)
    assert all(r.checkin <= t_split for r in split.train.records())
    assert all(r.checkin > t_split for r in split.test.records())
    assert _multiset(split.train.records()) + _multiset(split.test.records()) == _multiset(
        ds.records())
    for u in split.cold_start_users:
        assert len(split.train.trajectories[u]) == 0


def test_split_boundary_goes_to_train():
    r = StaypointRecord("u", GeoPoint(0, 0), 100.0, 200.0)
    split = split_train_test(dataset_from_records([r]), 100.0)
    assert split.train.n_records() == 1 and split.test.n_records() == 0


def test_split_all_before_gives_empty_test():
    recs = [StaypointRecord("u", GeoPoint(0, 0), float(t), float(t + 1)) for t in range(5)]
    split = split_train_test(dataset_from_records(recs), 1e6)
    assert split.test.n_records() == 0


def test_quantile_split_time():
    recs = [StaypointRecord("u", GeoPoint(0, 0), float(t), float(t)) for t in range(10)]
    assert quantile_split_time(dataset_from_records(recs), 0.8) == 7.0


# -- geometry ---------------------------------------------------------------------------

def test_haversine_half_circumference():
    assert haversine_km(GeoPoint(0, 0), GeoPoint(0, 180)) == pytest.approx(20015.1, abs=0.5)


def test_haversine_against_cosine_law_on_beijing_pair():
    a, b = GeoPoint(39.9359, 116.4531), GeoPoint(39.9985, 116.3872)
    assert haversine_km(a, b) == pytest.approx(cosine_law_km(a, b), rel=1e-6)


@settings(max_examples=200, deadline=None)
@given(coords, coords)
def test_haversine_properties(c1, c2):
    a, b = GeoPoint(*c1), GeoPoint(*c2)
    d = haversine_km(a, b)
    assert d >= 0
    assert d == haversine_km(b, a)
    assert haversine_km(a, a) == 0
    # the cosine law loses precision for tiny angles
    if d > 1.0:
        assert d == pytest.approx(cosine_law_km(a, b), rel=1e-6)


# -- staypoints -------------------------------------------------------------------------

def brute_force_staypoints(fixes, dist_m, time_s):
    """Enumerate every candidate run [i, j] explicitly, then scan left to right."""
    n = len(fixes)

    def ok(i, j):
        return all(cosine_law_km(fixes[i][0], fixes[k][0]) * 1000 <= dist_m
                   for k in range(i, j + 1))

    out, i = [], 0
    while i < n - 1:
        j = max(k for k in range(i, n) if ok(i, k))
        if fixes[j][1] - fixes[i][1] >= time_s:
            out.append((i, j))
            i = j + 1
        else:
            i += 1
    return out


def _runs_of(fixes, staypoints):
    times = [t for _, t in fixes]
    return [(times.index(s.checkin), len(times) - 1 - times[::-1].index(s.leave))
            for s in staypoints]


def test_single_fix_has_no_staypoint():
    assert extract_staypoints([(GeoPoint(1, 1), 0.0)]) == []


def test_identical_fixes_form_one_staypoint():
    fixes = [(GeoPoint(39.9, 116.4), 200.0 * k) for k in range(10)]
    sps = extract_staypoints(fixes, 200.0, 1200.0)
    assert len(sps) == 1
    assert sps[0].location.lat == pytest.approx(39.9)
    assert sps[0].location.lon == pytest.approx(116.4)
    assert sps[0].stay_seconds == 1800.0


def test_two_clusters_with_transit():
    rng = np.random.default_rng(3)
    fixes, t = [], 0.0
    for _ in range(21):        # cluster A, 20 minutes
        fixes.append((GeoPoint(39.90 + rng.normal(0, 1e-4), 116.40 + rng.normal(0, 1e-4)), t))
        t += 60.0
    for k in range(1, 6):      # fast transit, 1 km per fix
        fixes.append((GeoPoint(39.90 + 0.009 * k, 116.40), t))
        t += 60.0
    for _ in range(26):        # cluster B, 25 minutes
        fixes.append((GeoPoint(39.95 + rng.normal(0, 1e-4), 116.40 + rng.normal(0, 1e-4)), t))
        t += 60.0
    sps = extract_staypoints(fixes, 200.0, 1200.0)
    assert len(sps) == 2
    assert _runs_of(fixes, sps) == brute_force_staypoints(fixes, 200.0, 1200.0)
    assert sps[0].location.lat == pytest.approx(39.90, abs=1e-3)
    assert sps[1].location.lat == pytest.approx(39.95, abs=1e-3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 200))
def test_staypoints_match_brute_force_on_random_walks(seed, n):
    rng = np.random.default_rng(seed)
    moving = rng.random(n) < 0.25
    steps = rng.normal(0, 4e-4, (n, 2)) * moving[:, None] + rng.normal(0, 2e-5, (n, 2))
    path = np.array([39.9, 116.4]) + np.cumsum(steps, axis=0)
    times = np.cumsum(rng.uniform(30, 300, n))
    fixes = [(GeoPoint(float(a), float(b)), float(t)) for (a, b), t in zip(path, times)]
    sps = extract_staypoints(fixes, 200.0, 900.0)
    assert _runs_of(fixes, sps) == brute_force_staypoints(fixes, 200.0, 900.0)


def test_unsorted_fixes_rejected():
    with pytest.raises(TrajectoryError):
        extract_staypoints([(GeoPoint(0, 0), 10.0), (GeoPoint(0, 0), 5.0)])


# -- features ---------------------------------------------------------------------------

def test_features_of_table1():
    ds = parse_dataset(TABLE1)
    traj = ds.trajectories["153"]
    feats = derive_features(traj)
    # 2009-06-21 was a Sunday
    assert (feats[0].hour, feats[0].day_of_week) == (3, 6)
    assert feats[0].travel_km == 0.0
    r0, r1 = traj.records[0], traj.records[1]
    assert feats[1].travel_km == pytest.approx(cosine_law_km(r0.location, r1.location), rel=1e-6)
    assert feats[0].stay_minutes == pytest.approx(2156 / 60)


@settings(max_examples=50, deadline=None)
@given(st.lists(record_st, min_size=1, max_size=20))
def test_feature_bounds(records):
    ds = dataset_from_records(records)
    for traj in ds.trajectories.values():
        feats = derive_features(traj)
        assert len(feats) == len(traj)
        assert feats[0].travel_km == 0.0
        for f in feats:
            assert 0 <= f.hour <= 23 and 0 <= f.day_of_week <= 6
            assert f.travel_km >= 0 and f.stay_minutes >= 0


def test_stream_input_accepted():
    assert parse_dataset(io.StringIO(TABLE1)).n_records() == 3
