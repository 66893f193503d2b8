"""Sparse User-POI visit matrices and low-rank factorization."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .trajectory import TrajectoryDataset

BINARY = "binary"
COUNT = "count"


class MatrixError(ValueError):
    pass


@dataclass(frozen=True)
class VisitMatrix:
    """User x POI matrix. ``counts`` always holds raw visit counts;
    ``entries`` holds the mode-specific values (0/1 in binary mode)."""

    users: Mapping[str, int]
    pois: Mapping[str, int]
    counts: sp.csr_matrix
    mode: str
    column_types: tuple[str, ...]

    @property
    def entries(self) -> sp.csr_matrix:
        if self.mode == BINARY:
            return (self.counts > 0).astype(np.float64).tocsr()
        return self.counts.astype(np.float64)

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    def dense(self) -> np.ndarray:
        return self.entries.toarray()

    @property
    def user_ids(self) -> list[str]:
        return sorted(self.users, key=self.users.__getitem__)

    @property
    def poi_ids(self) -> list[str]:
        return sorted(self.pois, key=self.pois.__getitem__)


def build_matrix(dataset: TrajectoryDataset, mode: str = BINARY,
                 users: Sequence[str] | None = None,
                 pois: Sequence[str] | None = None) -> VisitMatrix:
    """Visit matrix over ``users`` x ``pois`` (default: the dataset's own).

    Passing the index lists of another split keeps train/test matrices
    aligned; users or POIs without records get all-zero rows/columns.
    """
    if mode not in (BINARY, COUNT):
        raise MatrixError(f"unknown matrix mode {mode!r}")
    users = list(users) if users is not None else dataset.users
    pois = list(pois) if pois is not None else sorted(dataset.poi_catalog)
    uidx = {u: i for i, u in enumerate(users)}
    pidx = {p: j for j, p in enumerate(pois)}
    if len(uidx) != len(users) or len(pidx) != len(pois):
        raise MatrixError("duplicate user or poi ids")
    cells = Counter()
    for u, traj in dataset.trajectories.items():
        if u not in uidx:
            continue
        for r in traj.records:
            j = pidx.get(r.poi_id)
            if j is not None:
                cells[uidx[u], j] += 1
    if cells:
        keys = np.array(list(cells.keys()), dtype=np.int64)
        vals = np.fromiter(cells.values(), dtype=np.int64, count=len(cells))
        rows, cols = keys[:, 0], keys[:, 1]
    else:
        rows = cols = vals = np.zeros(0, dtype=np.int64)
    counts = sp.csr_matrix((vals, (rows, cols)), shape=(len(users), len(pois)), dtype=np.int64)
    ctypes = tuple(dataset.poi_catalog[p][1] if p in dataset.poi_catalog else "unknown"
                   for p in pois)
    return VisitMatrix(uidx, pidx, counts, mode, ctypes)


def matrix_from_dense(values, mode: str = COUNT, column_types: Sequence[str] | None = None,
                      user_ids: Sequence[str] | None = None,
                      poi_ids: Sequence[str] | None = None) -> VisitMatrix:
    values = np.asarray(values)
    if np.any(values < 0) or np.any(values != np.round(values)):
        raise MatrixError("visit counts must be non-negative integers")
    n, m = values.shape
    user_ids = list(user_ids) if user_ids is not None else [f"u{i}" for i in range(n)]
    poi_ids = list(poi_ids) if poi_ids is not None else [f"p{j}" for j in range(m)]
    ctypes = tuple(column_types) if column_types is not None else ("unknown",) * m
    return VisitMatrix({u: i for i, u in enumerate(user_ids)},
                       {p: j for j, p in enumerate(poi_ids)},
                       sp.csr_matrix(values.astype(np.int64)), mode, ctypes)


# -- factorization -----------------------------------------------------------------

@dataclass(frozen=True)
class FactorizedMatrix:
    left: np.ndarray           # n_users x k
    singular_values: np.ndarray
    right: np.ndarray          # n_pois x k

    @property
    def k(self) -> int:
        return self.singular_values.shape[0]


def _as_dense(matrix) -> np.ndarray:
    if isinstance(matrix, VisitMatrix):
        return matrix.dense()
    if sp.issparse(matrix):
        return matrix.toarray().astype(np.float64)
    return np.asarray(matrix, dtype=np.float64)


def _fix_signs(u, s, v):
    # largest-magnitude entry of every left vector made positive
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, s, v * signs


def randomized_range_svd(a: np.ndarray, k: int, oversampling: int = 10,
                         power_iterations: int = 2, seed: int = 0):
    """Randomized SVD: Gaussian range finder + subspace power iterations."""
    n, m = a.shape
    ell = min(k + oversampling, min(n, m))
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(a @ rng.standard_normal((m, ell)))
    for _ in range(power_iterations):
        w, _ = np.linalg.qr(a.T @ q)
        q, _ = np.linalg.qr(a @ w)
    ub, s, vt = np.linalg.svd(q.T @ a, full_matrices=False)
    return (q @ ub)[:, :k], s[:k], vt[:k].T


def truncated_svd(matrix, k: int, method: str = "deterministic", seed: int = 0,
                  oversampling: int = 10, power_iterations: int = 2) -> FactorizedMatrix:
    """Top-``k`` singular triplets of a (densified) visit matrix."""
    a = _as_dense(matrix)
    if a.ndim != 2:
        raise MatrixError("expected a 2-D matrix")
    if not 1 <= k <= min(a.shape):
        raise MatrixError(f"k={k} outside [1, {min(a.shape)}]")
    if method == "deterministic":
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        u, s, v = u[:, :k], s[:k], vt[:k].T
    elif method == "randomized":
        u, s, v = randomized_range_svd(a, k, oversampling, power_iterations, seed)
    else:
        raise MatrixError(f"unknown svd method {method!r}")
    u, s, v = _fix_signs(u, s, v)
    return FactorizedMatrix(u, np.maximum(s, 0.0), v)


def reconstruct(factors: FactorizedMatrix) -> np.ndarray:
    """Expected visit matrix U diag(s) V^T; entries may leave [0, 1]."""
    return (factors.left * factors.singular_values) @ factors.right.T


def poi_type_histogram(train: VisitMatrix | TrajectoryDataset, user: str) -> dict[str, int]:
    """Visit counts per venue type for ``user`` (count semantics in any mode)."""
    if isinstance(train, TrajectoryDataset):
        if user not in train.trajectories:
            raise KeyError(f"unknown user {user!r}")
        hist = Counter(train.poi_catalog[r.poi_id][1] for r in train.trajectories[user].records)
        return dict(sorted(hist.items()))
    if user not in train.users:
        raise KeyError(f"unknown user {user!r}")
    row = train.counts.getrow(train.users[user])
    hist = Counter()
    for j, c in zip(row.indices, row.data):
        if c:
            hist[train.column_types[j]] += int(c)
    return dict(sorted(hist.items()))


# -- export ----------------------------------------------------------------------

def export_matrix(matrix: VisitMatrix, coo_path, index_path) -> None:
    """Write ``row col value`` lines plus a JSON sidecar with the index maps."""
    coo = matrix.entries.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(coo_path, "w", encoding="utf-8") as fh:
        for i in order:
            fh.write(f"{coo.row[i]} {coo.col[i]} {coo.data[i]:g}\n")
    sidecar = {"mode": matrix.mode, "shape": list(matrix.shape),
               "users": matrix.user_ids, "pois": matrix.poi_ids,
               "column_types": list(matrix.column_types)}
    with open(index_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_matrix(coo_path, index_path) -> VisitMatrix:
    with open(index_path, encoding="utf-8") as fh:
        side = json.load(fh)
    n, m = side["shape"]
    vals = np.zeros((n, m))
    with open(coo_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r, c, v = line.split()
                vals[int(r), int(c)] = float(v)
    return matrix_from_dense(vals, side["mode"], side["column_types"], side["users"], side["pois"])


def load_demo() -> dict:
    """The bundled 5-user x 8-POI illustration (train counts, test visits)."""
    text = resources.files("trajsurprise.data").joinpath("demo_matrix.json").read_text()
    demo = json.loads(text)
    demo["train"] = np.array(demo["train"], dtype=np.int64)
    demo["test"] = np.array(demo["test"], dtype=np.int64)
    return demo
