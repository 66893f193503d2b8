import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajsurprise.matrix import (
    BINARY, COUNT, MatrixError, build_matrix, export_matrix, load_demo, load_matrix,
    matrix_from_dense, poi_type_histogram, reconstruct, truncated_svd,
)
from trajsurprise.trajectory import GeoPoint, StaypointRecord, dataset_from_records


def _rec(user, lat, t, vtype="Apartment"):
    return StaypointRecord(user, GeoPoint(lat, 0.0), float(t), float(t) + 60.0, vtype)


def _tail_error(a, k):
    s = np.linalg.svd(a, compute_uv=False)
    return np.sqrt(np.sum(s[k:] ** 2))


def test_binary_and_count_entries():
    ds = dataset_from_records([_rec("u", 1.0, t) for t in range(3)] + [_rec("v", 2.0, 0)])
    b = build_matrix(ds, BINARY)
    c = build_matrix(ds, COUNT)
    ui, pj = b.users["u"], b.pois[ds.trajectories["u"].records[0].poi_id]
    assert b.dense()[ui, pj] == 1
    assert c.dense()[ui, pj] == 3
    assert b.dense()[ui].sum() == 1


def test_user_without_records_gets_zero_row():
    ds = dataset_from_records([_rec("u", 1.0, 0)], users=["ghost"])
    m = build_matrix(ds, COUNT)
    assert m.dense()[m.users["ghost"]].sum() == 0


def test_unknown_mode_rejected():
    ds = dataset_from_records([_rec("u", 1.0, 0)])
    with pytest.raises(MatrixError):
        build_matrix(ds, "tfidf")


def test_rank1_exact():
    a = np.array([[1.0, 2.0], [2.0, 4.0]])
    np.testing.assert_allclose(reconstruct(truncated_svd(a, 1)), a, atol=1e-10)


def test_eckart_young_tail_and_eigen_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(20, 30))
    f = truncated_svd(a, 5)
    err = np.linalg.norm(a - reconstruct(f))
    assert err == pytest.approx(_tail_error(a, 5), abs=1e-8)
    eig = np.sort(np.linalg.eigvalsh(a.T @ a))[::-1][:5]
    np.testing.assert_allclose(f.singular_values, np.sqrt(eig), rtol=1e-9)


def test_full_rank_identity_and_zero():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(6, 4))
    assert np.linalg.norm(a - reconstruct(truncated_svd(a, 4))) < 1e-8
    np.testing.assert_allclose(reconstruct(truncated_svd(np.eye(3), 3)), np.eye(3), atol=1e-10)
    np.testing.assert_allclose(reconstruct(truncated_svd(np.zeros((3, 4)), 2)), 0.0, atol=1e-12)


def test_k_out_of_range():
    with pytest.raises(MatrixError):
        truncated_svd(np.ones((3, 4)), 4)
    with pytest.raises(MatrixError):
        truncated_svd(np.ones((3, 4)), 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 50), st.integers(2, 50))
def test_eckart_young_beats_random_candidates(seed, n, m):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, m))
    k = int(rng.integers(1, min(n, m) + 1))
    err = np.linalg.norm(a - reconstruct(truncated_svd(a, k)))
    assert err == pytest.approx(_tail_error(a, k), abs=1e-8)
    left = rng.normal(size=(1000, n, k))
    right = rng.normal(size=(1000, k, m))
    cand = left @ right
    # least-squares scale on each candidate, so they are not trivially bad
    scale = np.einsum("bij,ij->b", cand, a) / np.einsum("bij,bij->b", cand, cand)
    cand_err = np.linalg.norm(a - scale[:, None, None] * cand, axis=(1, 2))
    assert np.all(err <= cand_err + 1e-9)


def test_randomized_svd_close_to_deterministic():
    for trial in range(20):
        rng = np.random.default_rng(trial)
        a = rng.normal(size=(50, 80))
        det = np.linalg.norm(a - reconstruct(truncated_svd(a, 5)))
        rnd = np.linalg.norm(a - reconstruct(truncated_svd(a, 5, "randomized", seed=trial)))
        assert rnd <= 1.5 * det


def test_randomized_svd_reproducible():
    a = np.random.default_rng(0).normal(size=(30, 40))
    f1 = truncated_svd(a, 3, "randomized", seed=7)
    f2 = truncated_svd(a, 3, "randomized", seed=7)
    np.testing.assert_array_equal(reconstruct(f1), reconstruct(f2))


def test_demo_matrix_expected_values():
    demo = load_demo()
    assert list(demo["train"][0][:4]) == [34, 20, 0, 8]
    exp = reconstruct(truncated_svd(demo["train"], demo["k"]))
    u1 = demo["users"].index("User 1")
    house_b = demo["pois"].index("House B")
    new_rest = demo["pois"].index("New Restaurant")
    assert demo["train"][u1, house_b] == 0
    # frozen from a LAPACK SVD of the bundled matrix
    assert exp[u1, house_b] == pytest.approx(2.530, abs=5e-3)
    assert exp[u1, new_rest] == pytest.approx(-0.656, abs=5e-3)


def test_histogram_simple_and_cold_start():
    recs = ([_rec("u", 1.0, t, "Restaurant") for t in range(3)]
            + [_rec("u", 2.0, 10 + t, "Apartment") for t in range(7)])
    ds = dataset_from_records(recs, users=["cold"])
    assert poi_type_histogram(ds, "u") == {"Apartment": 7, "Restaurant": 3}
    assert poi_type_histogram(ds, "cold") == {}
    m = build_matrix(ds, BINARY)
    assert poi_type_histogram(m, "u") == {"Apartment": 7, "Restaurant": 3}
    with pytest.raises(KeyError):
        poi_type_histogram(ds, "nobody")


def test_histogram_totals_equal_count_row_sums():
    types = ["Apartment", "Workplace", "Restaurant", "Recreational"]
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n_pois = int(rng.integers(1, 8))
        ptypes = rng.choice(types, n_pois)
        recs = [_rec(f"u{rng.integers(0, 4)}", float(p), t, str(ptypes[p]))
                for t, p in enumerate(rng.integers(0, n_pois, rng.integers(1, 30)))]
        ds = dataset_from_records(recs)
        m = build_matrix(ds, COUNT)
        sums = np.asarray(m.counts.sum(axis=1)).ravel()
        for u, i in m.users.items():
            assert sum(poi_type_histogram(m, u).values()) == sums[i] == len(ds.trajectories[u])


def test_export_round_trip(tmp_path):
    m = matrix_from_dense([[0, 2, 1], [3, 0, 0]], COUNT, ["A", "B", "C"])
    export_matrix(m, tmp_path / "m.coo", tmp_path / "m.json")
    back = load_matrix(tmp_path / "m.coo", tmp_path / "m.json")
    np.testing.assert_array_equal(back.dense(), m.dense())
    assert back.column_types == m.column_types and back.user_ids == m.user_ids


def test_negative_counts_rejected():
    with pytest.raises(MatrixError):
        matrix_from_dense([[1, -1]])
