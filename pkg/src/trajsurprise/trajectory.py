"""Semantic trajectories: records, datasets, CSV ingestion, splitting,
staypoint extraction and per-visit features."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Mapping, Sequence, TextIO

import numpy as np

from . import kernels

UNKNOWN_TYPE = "unknown"

# canonical field -> default header; headers match case-insensitively
DEFAULT_SCHEMA = {
    "user_id": "UserId",
    "lat": "Latitude",
    "lon": "Longitude",
    "checkin": "CheckinTime",
    "leave": "LeavingTime",
    "venue_type": "VenueType",
}
OPTIONAL_COLUMNS = {"poi_id": "PoiId"}


class SchemaError(ValueError):
    """The header lacks a required column."""


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if math.isnan(self.lat) or math.isnan(self.lon):
            raise TrajectoryError("NaN coordinate")
        if not -90.0 <= self.lat <= 90.0:
            raise TrajectoryError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise TrajectoryError(f"longitude out of range: {self.lon}")


def poi_id_for(point: GeoPoint) -> str:
    """Stable POI identifier from coordinates rounded to 5 decimals (~1 m)."""
    key = f"{round(point.lat, 5):.5f},{round(point.lon, 5):.5f}".encode()
    return "p" + hashlib.blake2b(key, digest_size=6).hexdigest()


@dataclass(frozen=True, slots=True)
class StaypointRecord:
    user_id: str
    location: GeoPoint
    checkin: float
    leave: float
    venue_type: str = UNKNOWN_TYPE
    poi_id: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.checkin) and math.isfinite(self.leave)):
            raise TrajectoryError("non-finite timestamp")
        if self.leave < self.checkin:
            raise TrajectoryError("leave precedes checkin")
        if not self.poi_id:
            object.__setattr__(self, "poi_id", poi_id_for(self.location))

    @property
    def stay_seconds(self) -> float:
        return self.leave - self.checkin


@dataclass(frozen=True)
class Trajectory:
    user_id: str
    records: tuple[StaypointRecord, ...] = ()

    def __post_init__(self):
        recs = tuple(self.records)
        for r in recs:
            if r.user_id != self.user_id:
                raise TrajectoryError(f"record of {r.user_id!r} in trajectory of {self.user_id!r}")
        for a, b in zip(recs, recs[1:]):
            if b.checkin < a.checkin:
                raise TrajectoryError("trajectory records must be sorted by checkin")
        object.__setattr__(self, "records", recs)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass(frozen=True)
class RowIssue:
    line: int
    reason: str


@dataclass(frozen=True)
class TrajectoryDataset:
    trajectories: Mapping[str, Trajectory]
    poi_catalog: Mapping[str, tuple[GeoPoint, str]]
    type_catalog: frozenset[str]
    parse_issues: tuple[RowIssue, ...] = ()

    def __post_init__(self):
        if not self.type_catalog:
            raise TrajectoryError("type catalog must not be empty")
        for traj in self.trajectories.values():
            for r in traj.records:
                if r.poi_id not in self.poi_catalog:
                    raise TrajectoryError(f"poi {r.poi_id!r} missing from catalog")

    @property
    def users(self) -> list[str]:
        return sorted(self.trajectories)

    def records(self) -> Iterable[StaypointRecord]:
        for u in self.users:
            yield from self.trajectories[u].records

    def n_records(self) -> int:
        return sum(len(t) for t in self.trajectories.values())

    def __len__(self):
        return len(self.trajectories)


def dataset_from_records(records: Iterable[StaypointRecord],
                         type_catalog: Iterable[str] | None = None,
                         users: Iterable[str] = (),
                         poi_catalog: Mapping[str, tuple[GeoPoint, str]] | None = None,
                         parse_issues: Sequence[RowIssue] = ()) -> TrajectoryDataset:
    """Group records per user (sorted by checkin) and build the catalogs.

    ``users`` adds users that own no record; the first type seen for a POI
    wins when rows disagree.
    """
    by_user: dict[str, list[StaypointRecord]] = defaultdict(list)
    catalog = dict(poi_catalog or {})
    types = set(type_catalog or ())
    for r in records:
        by_user[r.user_id].append(r)
        catalog.setdefault(r.poi_id, (r.location, r.venue_type))
        types.add(r.venue_type)
    for u in users:
        by_user.setdefault(u, [])
    for _, vtype in catalog.values():
        types.add(vtype)
    if not types:
        types = {UNKNOWN_TYPE}
    trajs = {u: Trajectory(u, tuple(sorted(rs, key=lambda r: (r.checkin, r.leave, r.poi_id))))
             for u, rs in sorted(by_user.items())}
    return TrajectoryDataset(trajs, catalog, frozenset(types), tuple(parse_issues))


# -- timestamps ---------------------------------------------------------------

def parse_timestamp(text: str) -> float:
    """ISO-8601 to UTC epoch seconds; naive stamps are taken as UTC."""
    s = text.strip()
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_timestamp(ts: float) -> str:
    dt = datetime.fromtimestamp(ts, tz=timezone.utc).replace(tzinfo=None)
    return dt.isoformat()


# -- CSV ingestion --------------------------------------------------------------

def _resolve_columns(header: Sequence[str], schema: Mapping[str, str]) -> dict[str, int]:
    lookup = {h.strip().lower(): i for i, h in enumerate(header)}
    cols = {}
    missing = []
    for key, name in schema.items():
        idx = lookup.get(name.strip().lower())
        if idx is None:
            missing.append(name)
        else:
            cols[key] = idx
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    for key, name in OPTIONAL_COLUMNS.items():
        if name.lower() in lookup:
            cols[key] = lookup[name.lower()]
    return cols


def parse_dataset(source: TextIO | str, schema: Mapping[str, str] | None = None,
                  delimiter: str = ",") -> TrajectoryDataset:
    """Read Table-1 style delimited text.

    Bad rows are skipped and listed in ``parse_issues``; a missing column
    raises :class:`SchemaError`.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    merged = dict(DEFAULT_SCHEMA)
    merged.update(schema or {})
    reader = csv.reader(source, delimiter=delimiter, skipinitialspace=True)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty input: no header row") from None
    cols = _resolve_columns(header, merged)
    records, issues = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            rec = StaypointRecord(
                user_id=row[cols["user_id"]].strip(),
                location=GeoPoint(float(row[cols["lat"]]), float(row[cols["lon"]])),
                checkin=parse_timestamp(row[cols["checkin"]]),
                leave=parse_timestamp(row[cols["leave"]]),
                venue_type=row[cols["venue_type"]].strip() or UNKNOWN_TYPE,
                poi_id=row[cols["poi_id"]].strip() if "poi_id" in cols else "",
            )
        except (IndexError, ValueError) as exc:
            issues.append(RowIssue(lineno, str(exc)))
            continue
        if not rec.user_id:
            issues.append(RowIssue(lineno, "empty user id"))
            continue
        records.append(rec)
    return dataset_from_records(records, parse_issues=issues)


def read_dataset(path, schema=None, delimiter=",") -> TrajectoryDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_dataset(fh, schema, delimiter)


def serialize_dataset(dataset: TrajectoryDataset, out: TextIO | None = None,
                      delimiter: str = ",") -> str | None:
    """Write the dataset back in the ingestion format (plus a PoiId column)."""
    buf = out if out is not None else io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(list(DEFAULT_SCHEMA.values()) + [OPTIONAL_COLUMNS["poi_id"]])
    for r in dataset.records():
        w.writerow([r.user_id, repr(r.location.lat), repr(r.location.lon),
                    format_timestamp(r.checkin), format_timestamp(r.leave),
                    r.venue_type, r.poi_id])
    return buf.getvalue() if out is None else None


def write_dataset(dataset: TrajectoryDataset, path, delimiter=",") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        serialize_dataset(dataset, fh, delimiter)


# -- train/test split --------------------------------------------------------------

@dataclass(frozen=True)
class SplitDataset:
    train: TrajectoryDataset
    test: TrajectoryDataset
    t_split: float
    cold_start_users: frozenset[str] = field(default_factory=frozenset)

    @property
    def users(self) -> list[str]:
        return sorted(set(self.train.trajectories) | set(self.test.trajectories))


def split_train_test(dataset: TrajectoryDataset, t_split: float) -> SplitDataset:
    """Records with checkin <= t_split go to train, the rest to test.

    Both halves keep every user and share the full POI/type catalogs.
    """
    if not math.isfinite(t_split):
        raise TrajectoryError("t_split must be finite")
    train, test = [], []
    for r in dataset.records():
        (train if r.checkin <= t_split else test).append(r)
    users = dataset.users
    kw = dict(type_catalog=dataset.type_catalog, users=users, poi_catalog=dataset.poi_catalog)
    tr = dataset_from_records(train, **kw)
    te = dataset_from_records(test, **kw)
    cold = frozenset(u for u in users if len(tr.trajectories[u]) == 0)
    return SplitDataset(tr, te, float(t_split), cold)


def quantile_split_time(dataset: TrajectoryDataset, train_fraction: float = 0.8) -> float:
    """Checkin time below which ``train_fraction`` of all records fall."""
    times = np.sort([r.checkin for r in dataset.records()])
    if times.size == 0:
        raise TrajectoryError("cannot split an empty dataset")
    k = min(max(int(math.ceil(train_fraction * times.size)) - 1, 0), times.size - 1)
    return float(times[k])


# -- geometry ----------------------------------------------------------------------

def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    return float(kernels.haversine_km_numpy(a.lat, a.lon, b.lat, b.lon))


def extract_staypoints(fixes: Sequence[tuple[GeoPoint, float]], dist_threshold_m: float = 200.0,
                       time_threshold_s: float = 1800.0, user_id: str = "",
                       venue_type: str = UNKNOWN_TYPE) -> list[StaypointRecord]:
    """Staypoints from time-ordered GPS fixes.

    A staypoint is a maximal run of consecutive fixes within
    ``dist_threshold_m`` of the run's first fix lasting at least
    ``time_threshold_s``; it sits at the mean of the run's coordinates.
    """
    if dist_threshold_m <= 0 or time_threshold_s <= 0:
        raise TrajectoryError("thresholds must be positive")
    if len(fixes) == 0:
        return []
    lat = np.array([p.lat for p, _ in fixes], dtype=np.float64)
    lon = np.array([p.lon for p, _ in fixes], dtype=np.float64)
    t = np.array([ts for _, ts in fixes], dtype=np.float64)
    if np.any(np.diff(t) < 0):
        raise TrajectoryError("fixes must be sorted by time")
    out = []
    for i, j in kernels.staypoint_runs(lat, lon, t, dist_threshold_m, time_threshold_s):
        loc = GeoPoint(float(lat[i:j + 1].mean()), float(lon[i:j + 1].mean()))
        out.append(StaypointRecord(user_id, loc, float(t[i]), float(t[j]), venue_type))
    return out


# -- per-visit features -------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class VisitFeatures:
    hour: int
    day_of_week: int
    travel_km: float
    stay_minutes: float


def derive_features(trajectory: Trajectory) -> list[VisitFeatures]:
    recs = trajectory.records
    if not recs:
        return []
    lat = np.array([r.location.lat for r in recs])
    lon = np.array([r.location.lon for r in recs])
    travel = np.zeros(len(recs))
    if len(recs) > 1:
        travel[1:] = kernels.haversine_km_array(lat[:-1], lon[:-1], lat[1:], lon[1:])
    feats = []
    for r, km in zip(recs, travel):
        dt = datetime.fromtimestamp(r.checkin, tz=timezone.utc)
        feats.append(VisitFeatures(dt.hour, dt.weekday(), float(km), r.stay_seconds / 60.0))
    return feats


def type_counts(dataset: TrajectoryDataset, user: str) -> Counter:
    traj = dataset.trajectories[user]
    return Counter(dataset.poi_catalog[r.poi_id][1] for r in traj.records)
