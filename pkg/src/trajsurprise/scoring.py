"""Surprise between expected and observed visits, and the user ranking."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .matrix import VisitMatrix
from .trajectory import TrajectoryDataset

ABS = "abs"
NEW_POI = "new_poi"
MISSING_POI = "missing_poi"
SUM = "sum"
MAX = "max"


class ScoringError(ValueError):
    pass


def _pair(expected, observed) -> tuple[np.ndarray, np.ndarray]:
    e = np.asarray(expected, dtype=np.float64)
    o = observed.dense() if isinstance(observed, VisitMatrix) else np.asarray(observed, dtype=np.float64)
    if e.shape != o.shape:
        raise ScoringError(f"expected {e.shape} and observed {o.shape} differ in shape")
    return e, o


def surprise_abs(expected, observed) -> np.ndarray:
    e, o = _pair(expected, observed)
    return np.abs(e - o)


def surprise_new_poi(expected, observed) -> np.ndarray:
    """Only visits beyond what the model expected count."""
    e, o = _pair(expected, observed)
    return np.maximum(0.0, o - e)


def surprise_missing_poi(expected, observed) -> np.ndarray:
    """Only expected visits that did not happen count."""
    e, o = _pair(expected, observed)
    return np.maximum(0.0, e - o)


SURPRISES = {ABS: surprise_abs, NEW_POI: surprise_new_poi, MISSING_POI: surprise_missing_poi}


def surprise(expected, observed, variant: str = ABS) -> np.ndarray:
    try:
        fn = SURPRISES[variant]
    except KeyError:
        raise ScoringError(f"unknown surprise variant {variant!r}") from None
    return fn(expected, observed)


def _as_map(values: np.ndarray, users: Sequence[str] | None) -> dict[str, float]:
    users = users if users is not None else [str(i) for i in range(len(values))]
    return {u: float(v) for u, v in zip(users, values)}


def aggregate_sum(s: np.ndarray, users: Sequence[str] | None = None) -> dict[str, float]:
    return _as_map(np.asarray(s, dtype=np.float64).sum(axis=1), users)


def aggregate_max(s: np.ndarray, users: Sequence[str] | None = None) -> dict[str, float]:
    s = np.asarray(s, dtype=np.float64)
    vals = s.max(axis=1, initial=0.0) if s.shape[1] else np.zeros(s.shape[0])
    return _as_map(vals, users)


AGGREGATIONS = {SUM: aggregate_sum, MAX: aggregate_max}


# -- POI-type surprise --------------------------------------------------------------

@dataclass(frozen=True)
class TypeProfile:
    user_id: str
    probs: Mapping[str, float]
    most_likely: str | None


def type_profile(train: TrajectoryDataset, user: str) -> TypeProfile:
    """Share of the user's train visits per venue type and its argmax.

    Ties go to the lexicographically smallest type. A user without train
    visits gets an empty profile and ``most_likely=None``.
    """
    traj = train.trajectories.get(user)
    if traj is None:
        raise KeyError(f"unknown user {user!r}")
    counts = Counter(train.poi_catalog[r.poi_id][1] for r in traj.records)
    total = sum(counts.values())
    if total == 0:
        return TypeProfile(user, {}, None)
    probs = {k: counts[k] / total for k in sorted(counts)}
    top = max(counts.values())
    most = min(k for k, c in counts.items() if c == top)
    return TypeProfile(user, probs, most)


def poi_type_surprise(test: TrajectoryDataset, profile: TypeProfile, user: str) -> float:
    """Number of test visits whose venue type differs from the profile's mode."""
    if profile.most_likely is None:
        return 0.0
    traj = test.trajectories.get(user)
    if traj is None:
        return 0.0
    return float(sum(1 for r in traj.records
                     if test.poi_catalog[r.poi_id][1] != profile.most_likely))


def anomaly_score(matrix_surprise: float, type_surprise: float) -> float:
    if matrix_surprise < 0 or type_surprise < 0:
        raise ScoringError("surprise components must be non-negative")
    return matrix_surprise + type_surprise


@dataclass(frozen=True)
class UserScore:
    user_id: str
    matrix_surprise: float
    type_surprise: float
    aggregation: str = SUM
    cold_start: bool = False

    @property
    def total(self) -> float:
        return anomaly_score(self.matrix_surprise, self.type_surprise)


def rank_users(scores: Mapping[str, float]) -> list[tuple[str, float, int]]:
    """(user, score, 1-based rank), highest score first, ties by user id."""
    ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(u, float(s), i + 1) for i, (u, s) in enumerate(ordered)]


def score_users(expected: np.ndarray, observed: VisitMatrix, train: TrajectoryDataset,
                test: TrajectoryDataset, variant: str = ABS, aggregation: str = SUM,
                use_type_surprise: bool = True,
                cold_start: frozenset[str] = frozenset()) -> list[UserScore]:
    """Per-user matrix surprise plus POI-type surprise.

    Rows of cold-start users are scored against a zero expectation.
    """
    users = observed.user_ids
    expected = np.array(expected, dtype=np.float64, copy=True)
    for u in cold_start:
        if u in observed.users:
            expected[observed.users[u]] = 0.0
    s = surprise(expected, observed, variant)
    try:
        per_user = AGGREGATIONS[aggregation](s, users)
    except KeyError:
        raise ScoringError(f"unknown aggregation {aggregation!r}") from None
    out = []
    for u in users:
        ts = 0.0
        if use_type_surprise and u not in cold_start:
            ts = poi_type_surprise(test, type_profile(train, u), u)
        out.append(UserScore(u, per_user[u], ts, aggregation, u in cold_start))
    return out
