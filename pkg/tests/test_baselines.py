import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajsurprise.baselines import (
    FEATURE_NAMES, IsolationForest, average_path_length, ecod_matrix, ecod_score,
    featurize_users, harmonic, iforest_fit_score,
)
from trajsurprise.trajectory import GeoPoint, StaypointRecord, dataset_from_records, split_train_test


def _vectors(X):
    return {f"u{i:03d}": row for i, row in enumerate(np.asarray(X, dtype=float))}


def test_average_path_length_closed_form():
    assert average_path_length(2) == 1.0
    assert average_path_length(1) == 0.0
    assert harmonic(1) == 1.0
    n = 256
    assert average_path_length(n) == pytest.approx(
        2 * sum(1 / k for k in range(1, n)) - 2 * (n - 1) / n, rel=1e-14)


def test_single_tree_on_two_points():
    f = IsolationForest(n_trees=1, subsample_size=2, seed=0).fit([[0.0], [1.0]])
    np.testing.assert_array_equal(f.path_lengths([[0.0], [1.0]]), [1.0, 1.0])


def test_outlier_has_max_score():
    wins = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        X = np.vstack([rng.normal(0, 0.1, (50, 2)), [[5.0, 5.0]]])
        scores = iforest_fit_score(_vectors(X), seed=trial)
        wins += max(scores, key=scores.get) == "u050"
    assert wins >= 95


def test_iforest_range_determinism_and_constant_data():
    rng = np.random.default_rng(0)
    v = _vectors(rng.normal(size=(40, 3)))
    a, b = iforest_fit_score(v, seed=4), iforest_fit_score(v, seed=4)
    assert a == b
    assert all(0 < s <= 1 for s in a.values())
    const = iforest_fit_score(_vectors(np.ones((10, 3))))
    assert len(set(const.values())) == 1


def test_iforest_tree_height_limit():
    X = np.random.default_rng(1).normal(size=(300, 2))
    f = IsolationForest(n_trees=10, subsample_size=64, seed=0).fit(X)
    assert max(f.tree_heights()) <= math.ceil(math.log2(64))


def test_iforest_needs_two_samples():
    with pytest.raises(ValueError):
        iforest_fit_score(_vectors([[1.0, 2.0]]))


def test_ecod_examples():
    same = ecod_score(_vectors(np.ones((5, 2))))
    assert len(set(same.values())) == 1
    s = ecod_score(_vectors(np.arange(1, 11)[:, None]))
    assert s["u009"] >= s["u004"]


def test_ecod_one_dim_tail_arithmetic():
    # symmetric data has zero skew, so the right tail #{X >= x}/n is used
    x = np.arange(1, 11, dtype=float)[:, None]
    np.testing.assert_allclose(ecod_matrix(x)[:, 0], -np.log((10 - np.arange(10)) / 10))


def test_ecod_duplicated_median_keeps_argmax():
    # the extreme point's score does rise by log((n+1)/n): an extra sample
    # shrinks its tail mass; only the ranking is stable
    base = np.array([1.0, 2, 3, 4, 5, 6, 7, 8, 9, 30])[:, None]
    before = ecod_matrix(base)[:, 0]
    after = ecod_matrix(np.vstack([base, [[5.5]]]))[:, 0]
    assert int(np.argmax(after)) == int(np.argmax(before)) == 9
    assert after[9] == pytest.approx(before[9] + math.log(11 / 10))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 10), st.floats(-100, 100))
def test_ecod_invariant_to_increasing_affine_maps(seed, a, b):
    X = np.random.default_rng(seed).exponential(size=(30, 3))
    np.testing.assert_allclose(ecod_matrix(X), ecod_matrix(a * X + b), rtol=1e-9, atol=1e-12)


def _rec(user, lat, t, vtype):
    return StaypointRecord(user, GeoPoint(lat, 0.0), float(t), float(t) + 600, vtype)


def test_featurize_users():
    recs = [_rec("a", 1.0, 0, "Apartment"), _rec("a", 2.0, 1000, "Workplace"),
            _rec("a", 1.0, 5000, "Apartment"), _rec("a", 3.0, 6000, "Gym"),
            _rec("a", 4.0, 7000, "Gym"),
            _rec("b", 1.0, 0, "Apartment"),
            _rec("c", 1.0, 5000, "Apartment")]
    split = split_train_test(dataset_from_records(recs, users=["d"]), 2000)
    vecs, cold = featurize_users(split)
    assert cold == {"c", "d"}
    assert np.all(vecs["c"] == 0) and np.all(vecs["d"] == 0)
    assert np.all(vecs["b"] == 0)             # no test visits
    a = dict(zip(FEATURE_NAMES, vecs["a"]))
    assert a["visits"] == 3
    # set oracle: test POIs minus train POIs
    train_pois = {r.poi_id for r in split.train.trajectories["a"].records}
    test_pois = {r.poi_id for r in split.test.trajectories["a"].records}
    assert a["unseen_pois"] == len(test_pois - train_pois) == 2
    assert a["distinct_types"] == 2
    assert a["off_type_fraction"] == pytest.approx(2 / 3)


def test_identical_trajectories_identical_vectors():
    recs = []
    for u in ("a", "b"):
        recs += [_rec(u, 1.0, 0, "Apartment"), _rec(u, 1.0, 5000, "Apartment"),
                 _rec(u, 2.0, 6000, "Gym")]
    vecs, _ = featurize_users(split_train_test(dataset_from_records(recs), 2000))
    np.testing.assert_array_equal(vecs["a"], vecs["b"])
