"""Tabular per-user features and two unsupervised outlier detectors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import skew

from . import kernels
from .scoring import type_profile
from .trajectory import SplitDataset, derive_features

FEATURE_NAMES = (
    "visits", "distinct_pois", "distinct_types", "mean_travel_km", "max_travel_km",
    "mean_stay_min", "night_fraction", "off_type_fraction", "unseen_pois",
)


def _is_night(hour: int) -> bool:
    return hour >= 22 or hour < 6


def featurize_users(split: SplitDataset) -> tuple[dict[str, np.ndarray], frozenset[str]]:
    """Test-period feature vector per user, plus the set of cold-start users
    (who get all-zero vectors)."""
    out = {}
    train, test = split.train, split.test
    for u in split.users:
        vec = np.zeros(len(FEATURE_NAMES))
        if u in split.cold_start_users:
            out[u] = vec
            continue
        recs = test.trajectories[u].records if u in test.trajectories else ()
        if recs:
            feats = derive_features(test.trajectories[u])
            seen = {r.poi_id for r in train.trajectories[u].records}
            types = [test.poi_catalog[r.poi_id][1] for r in recs]
            most = type_profile(train, u).most_likely
            km = np.array([f.travel_km for f in feats])
            vec[:] = (
                len(recs),
                len({r.poi_id for r in recs}),
                len(set(types)),
                km.mean(),
                km.max(),
                np.mean([f.stay_minutes for f in feats]),
                np.mean([_is_night(f.hour) for f in feats]),
                np.mean([t != most for t in types]),
                len({r.poi_id for r in recs} - seen),
            )
        out[u] = vec
    return out, frozenset(split.cold_start_users)


def _stack(vectors) -> tuple[list[str], np.ndarray]:
    users = sorted(vectors)
    X = np.array([np.asarray(vectors[u], dtype=np.float64) for u in users]).reshape(len(users), -1)
    if not np.all(np.isfinite(X)):
        raise ValueError("feature vectors must be finite")
    return users, X


# -- isolation forest --------------------------------------------------------------

def harmonic(n: int) -> float:
    return math.fsum(1.0 / k for k in range(1, n + 1))


def average_path_length(n: int) -> float:
    """c(n): mean unsuccessful-search path length in a BST of n keys."""
    if n <= 1:
        return 0.0
    return 2.0 * harmonic(n - 1) - 2.0 * (n - 1) / n


@dataclass
class IsolationForest:
    n_trees: int = 100
    subsample_size: int = 256
    seed: int = 0
    # flattened forest; filled by fit()
    roots: np.ndarray = field(default=None, repr=False)
    feature: np.ndarray = field(default=None, repr=False)
    threshold: np.ndarray = field(default=None, repr=False)
    left: np.ndarray = field(default=None, repr=False)
    right: np.ndarray = field(default=None, repr=False)
    depth: np.ndarray = field(default=None, repr=False)
    leaf_value: np.ndarray = field(default=None, repr=False)
    psi: int = 0

    def fit(self, X) -> "IsolationForest":
        X = np.asarray(X, dtype=np.float64)
        n = X.shape[0]
        if n < 2:
            raise ValueError("isolation forest needs at least 2 samples")
        self.psi = min(self.subsample_size, n)
        height_limit = math.ceil(math.log2(self.psi))
        feature, threshold, left, right, depth, size = [], [], [], [], [], []

        def new_node(d):
            for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1),
                           (depth, d), (size, 0)):
                lst.append(v)
            return len(feature) - 1

        def grow(rows, d, rng):
            node = new_node(d)
            size[node] = len(rows)
            if d >= height_limit or len(rows) <= 1:
                return node
            sub = X[rows]
            lo, hi = sub.min(axis=0), sub.max(axis=0)
            splittable = np.flatnonzero(hi > lo)
            if splittable.size == 0:
                return node
            q = int(splittable[rng.integers(splittable.size)])
            p = rng.uniform(lo[q], hi[q])
            if p <= lo[q]:  # guard the half-open draw
                p = np.nextafter(lo[q], hi[q])
            mask = sub[:, q] < p
            feature[node], threshold[node] = q, float(p)
            left[node] = grow(rows[mask], d + 1, rng)
            right[node] = grow(rows[~mask], d + 1, rng)
            return node

        roots = []
        for child in np.random.SeedSequence(self.seed).spawn(self.n_trees):
            rng = np.random.default_rng(child)
            rows = rng.choice(n, size=self.psi, replace=False)
            roots.append(grow(rows, 0, rng))
        self.roots = np.array(roots, dtype=np.int64)
        self.feature = np.array(feature, dtype=np.int64)
        self.threshold = np.array(threshold)
        self.left = np.array(left, dtype=np.int64)
        self.right = np.array(right, dtype=np.int64)
        self.depth = np.array(depth, dtype=np.int64)
        sizes = np.array(size, dtype=np.int64)
        self.leaf_value = self.depth + np.array([average_path_length(int(s)) for s in sizes])
        return self

    def tree_heights(self) -> list[int]:
        heights = []
        bounds = list(self.roots) + [len(self.feature)]
        for a, b in zip(bounds, bounds[1:]):
            heights.append(int(self.depth[a:b].max()))
        return heights

    def path_lengths(self, X) -> np.ndarray:
        return kernels.forest_path_lengths(np.asarray(X, dtype=np.float64), self.roots,
                                           self.feature, self.threshold, self.left,
                                           self.right, self.leaf_value)

    def score(self, X) -> np.ndarray:
        """2^(-E[h(x)] / c(psi)), in (0, 1]; higher is more anomalous."""
        c = average_path_length(self.psi)
        return np.power(2.0, -self.path_lengths(X) / c)


def iforest_fit_score(vectors, n_trees: int = 100, subsample_size: int = 256,
                      seed: int = 0) -> dict[str, float]:
    users, X = _stack(vectors)
    forest = IsolationForest(n_trees, subsample_size, seed).fit(X)
    return dict(zip(users, map(float, forest.score(X))))


# -- ECOD -------------------------------------------------------------------------

def ecdf_tails(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per column: P(X <= x) and P(X >= x) under the empirical distribution."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    srt = np.sort(X, axis=0)
    left = np.empty_like(X)
    right = np.empty_like(X)
    for d in range(X.shape[1]):
        left[:, d] = np.searchsorted(srt[:, d], X[:, d], side="right") / n
        right[:, d] = (n - np.searchsorted(srt[:, d], X[:, d], side="left")) / n
    return left, right


def ecod_matrix(X) -> np.ndarray:
    """Per-sample, per-dimension tail scores -log(p), choosing the left
    tail for negatively skewed dimensions and the right tail otherwise."""
    X = np.asarray(X, dtype=np.float64)
    left, right = ecdf_tails(X)
    # constant columns have no skew; scipy would warn about them
    varying = np.ptp(X, axis=0) > 0
    sk = np.zeros(X.shape[1])
    if varying.any():
        sk[varying] = np.nan_to_num(skew(X[:, varying], axis=0))
    tail = np.where(sk < 0, left, right)
    return -np.log(tail)


def ecod_score(vectors) -> dict[str, float]:
    users, X = _stack(vectors)
    if X.shape[0] < 2:
        raise ValueError("ECOD needs at least 2 samples")
    return dict(zip(users, map(float, ecod_matrix(X).sum(axis=1))))
