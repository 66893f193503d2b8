"""Hot inner loops, each in two flavours.

Every kernel has a ``*_numpy`` implementation (vectorised where the
algorithm allows) and a ``*_numba`` twin compiled from a plain loop. The
public name binds to one of them at import time, see ``_accel``.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

EARTH_RADIUS_KM = 6371.0088


# -- great-circle distance --------------------------------------------------

def haversine_km_numpy(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(a, dtype=np.float64))
                              for a in (lat1, lon1, lat2, lon2))
    h = (np.sin((lat2 - lat1) / 2.0) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(h, 1.0)))


def _haversine_km_loop(lat1, lon1, lat2, lon2):
    n = lat1.shape[0]
    out = np.empty(n, dtype=np.float64)
    rad = np.pi / 180.0
    for i in range(n):
        p1 = lat1[i] * rad
        p2 = lat2[i] * rad
        dp = p2 - p1
        dl = (lon2[i] - lon1[i]) * rad
        h = np.sin(dp / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2.0) ** 2
        if h > 1.0:
            h = 1.0
        out[i] = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(h))
    return out


_haversine_km_jit = njit(_haversine_km_loop)


def haversine_km_numba(lat1, lon1, lat2, lon2):
    args = [np.ascontiguousarray(np.atleast_1d(a), dtype=np.float64)
            for a in (lat1, lon1, lat2, lon2)]
    args = np.broadcast_arrays(*args)
    shape = args[0].shape
    flat = [np.ascontiguousarray(a).ravel() for a in args]
    fn = _haversine_km_jit if _haversine_km_jit is not None else _haversine_km_loop
    return fn(*flat).reshape(shape)


# -- staypoint run detection ------------------------------------------------

def staypoint_runs_numpy(lat, lon, t, dist_threshold_m, time_threshold_s):
    """Return an (m, 2) array of inclusive (first, last) fix indices."""
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    n = lat.shape[0]
    runs = []
    i = 0
    while i < n - 1:
        d = haversine_km_numpy(lat[i], lon[i], lat[i + 1:], lon[i + 1:]) * 1000.0
        far = np.flatnonzero(d > dist_threshold_m)
        j = i + 1 + (far[0] if far.size else d.size)
        if t[j - 1] - t[i] >= time_threshold_s:
            runs.append((i, j - 1))
            i = j
        else:
            i += 1
    return np.array(runs, dtype=np.int64).reshape(-1, 2)


def _staypoint_runs_loop(lat, lon, t, dist_threshold_m, time_threshold_s):
    n = lat.shape[0]
    out = np.empty((n, 2), dtype=np.int64)
    m = 0
    rad = np.pi / 180.0
    i = 0
    while i < n - 1:
        p1 = lat[i] * rad
        cp1 = np.cos(p1)
        j = i + 1
        while j < n:
            p2 = lat[j] * rad
            h = (np.sin((p2 - p1) / 2.0) ** 2
                 + cp1 * np.cos(p2) * np.sin((lon[j] - lon[i]) * rad / 2.0) ** 2)
            if h > 1.0:
                h = 1.0
            if 2000.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(h)) > dist_threshold_m:
                break
            j += 1
        if t[j - 1] - t[i] >= time_threshold_s:
            out[m, 0] = i
            out[m, 1] = j - 1
            m += 1
            i = j
        else:
            i += 1
    return out[:m]


_staypoint_runs_jit = njit(_staypoint_runs_loop)


def staypoint_runs_numba(lat, lon, t, dist_threshold_m, time_threshold_s):
    fn = _staypoint_runs_jit if _staypoint_runs_jit is not None else _staypoint_runs_loop
    return fn(np.ascontiguousarray(lat, dtype=np.float64),
              np.ascontiguousarray(lon, dtype=np.float64),
              np.ascontiguousarray(t, dtype=np.float64),
              float(dist_threshold_m), float(time_threshold_s))


# -- embedding gradient scatter ----------------------------------------------

def scatter_add_rows_numpy(dst, idx, src):
    """dst[idx[k]] += src[k] for every k, accumulating repeats. In place."""
    np.add.at(dst, idx, src)
    return dst


def _scatter_add_rows_loop(dst, idx, src):
    n, e = src.shape
    for k in range(n):
        r = idx[k]
        for c in range(e):
            dst[r, c] += src[k, c]
    return dst


_scatter_add_rows_jit = njit(_scatter_add_rows_loop)


def scatter_add_rows_numba(dst, idx, src):
    fn = _scatter_add_rows_jit if _scatter_add_rows_jit is not None else _scatter_add_rows_loop
    return fn(dst, np.ascontiguousarray(idx, dtype=np.int64),
              np.ascontiguousarray(src, dtype=dst.dtype))


# -- isolation forest traversal ----------------------------------------------

def forest_path_lengths_numpy(X, roots, feature, threshold, left, right, leaf_value):
    """Mean path length of every row of X over the flattened forest.

    ``feature[node] < 0`` marks a leaf; ``leaf_value`` already holds
    depth + c(leaf size) for leaves.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    node = np.broadcast_to(np.asarray(roots, dtype=np.int64), (n, len(roots))).copy()
    rows = np.arange(n)[:, None]
    while True:
        f = feature[node]
        inner = f >= 0
        if not inner.any():
            break
        x = X[np.broadcast_to(rows, node.shape)[inner], f[inner]]
        go_left = x < threshold[node[inner]]
        node[inner] = np.where(go_left, left[node[inner]], right[node[inner]])
    return leaf_value[node].mean(axis=1)


def _forest_path_lengths_loop(X, roots, feature, threshold, left, right, leaf_value):
    n = X.shape[0]
    n_trees = roots.shape[0]
    out = np.zeros(n, dtype=np.float64)
    for i in range(n):
        acc = 0.0
        for t in range(n_trees):
            node = roots[t]
            while feature[node] >= 0:
                if X[i, feature[node]] < threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            acc += leaf_value[node]
        out[i] = acc / n_trees
    return out


_forest_path_lengths_jit = njit(_forest_path_lengths_loop)


def forest_path_lengths_numba(X, roots, feature, threshold, left, right, leaf_value):
    fn = _forest_path_lengths_jit if _forest_path_lengths_jit is not None else _forest_path_lengths_loop
    return fn(np.ascontiguousarray(X, dtype=np.float64),
              np.ascontiguousarray(roots, dtype=np.int64),
              np.ascontiguousarray(feature, dtype=np.int64),
              np.ascontiguousarray(threshold, dtype=np.float64),
              np.ascontiguousarray(left, dtype=np.int64),
              np.ascontiguousarray(right, dtype=np.int64),
              np.ascontiguousarray(leaf_value, dtype=np.float64))


if USE_NUMBA:
    haversine_km_array = haversine_km_numba
    staypoint_runs = staypoint_runs_numba
    scatter_add_rows = scatter_add_rows_numba
    forest_path_lengths = forest_path_lengths_numba
else:
    haversine_km_array = haversine_km_numpy
    staypoint_runs = staypoint_runs_numpy
    scatter_add_rows = scatter_add_rows_numpy
    forest_path_lengths = forest_path_lengths_numpy
