"""Neural collaborative filtering over (user, POI, visit-context) tuples.

Two towers share the embedding tables:

* an MLP over the concatenated user, POI, hour, weekday and travel-distance
  embeddings (hidden layers activated, linear scalar output);
* a GMF term ``u.p + w1*hour + w2*day + w3*dist + w4*type`` where each
  auxiliary feature is the mean of its embedding vector.

Their raw scores are blended as ``alpha*gmf + (1-alpha)*mlp``. Training
minimises binary cross-entropy of the sigmoid of the blend with mini-batch
SGD (optional heavy-ball momentum) and hand-written backpropagation.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import kernels
from .matrix import VisitMatrix
from .trajectory import StaypointRecord, TrajectoryDataset, VisitFeatures, derive_features

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "trajsurprise-ncf/1"
UNKNOWN_TYPE = "unknown"
INIT_SCALE = 0.05

# column layout of encoded input arrays
USER, HOUR, DAY, DIST, POI, TYPE = range(6)
FEATURE_TABLES = ("hour", "day", "dist", "type")


class NcfError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


NEGATIVE_CONTEXTS = ("empirical", "uniform")


@dataclass(frozen=True)
class HyperParams:
    embed_dim: int = 16
    mlp_layers: tuple[int, ...] = (64, 32, 16)
    activation: str = "relu"
    fusion_alpha: float = 0.5
    negatives_per_positive: int = 4
    learning_rate: float = 0.01
    epochs: int = 20
    batch_size: int = 256
    seed: int = 0
    distance_buckets: int = 10
    momentum: float = 0.0
    # "empirical" draws each negative's (hour, day, bucket) from a random
    # positive; "uniform" is uniform hour/day with bucket 0
    negative_context: str = "empirical"

    def __post_init__(self):
        object.__setattr__(self, "mlp_layers", tuple(int(w) for w in self.mlp_layers))
        for name in ("embed_dim", "negatives_per_positive", "epochs", "batch_size",
                     "distance_buckets"):
            if int(getattr(self, name)) < 1:
                raise NcfError(f"{name} must be a positive integer")
        if not self.mlp_layers or min(self.mlp_layers) < 1:
            raise NcfError("mlp_layers must list positive widths")
        if self.activation not in ("relu", "tanh"):
            raise NcfError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.fusion_alpha <= 1.0:
            raise NcfError("fusion_alpha must lie in [0, 1]")
        if self.learning_rate < 0:
            raise NcfError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise NcfError("momentum must lie in [0, 1)")
        if self.negative_context not in NEGATIVE_CONTEXTS:
            raise NcfError(f"negative_context must be one of {NEGATIVE_CONTEXTS}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "HyperParams":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "mlp_layers" in known:
            known["mlp_layers"] = tuple(known["mlp_layers"])
        return cls(**known)


@dataclass(frozen=True)
class Catalog:
    """Index maps shared by encoding, training and prediction.

    POI row ``n_pois`` of the embedding table is reserved for POIs never
    seen when the catalog was built.
    """

    users: Mapping[str, int]
    pois: Mapping[str, int]
    types: Mapping[str, int]
    poi_types: tuple[int, ...]

    @classmethod
    def from_matrix(cls, matrix: VisitMatrix) -> "Catalog":
        type_names = sorted(set(matrix.column_types) | {UNKNOWN_TYPE})
        tidx = {t: i for i, t in enumerate(type_names)}
        return cls(dict(matrix.users), dict(matrix.pois), tidx,
                   tuple(tidx[t] for t in matrix.column_types))

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_pois(self) -> int:
        return len(self.pois)

    @property
    def n_types(self) -> int:
        return len(self.types)

    @property
    def unseen_poi(self) -> int:
        return len(self.pois)

    def type_index(self, name: str) -> int:
        return self.types.get(name, self.types[UNKNOWN_TYPE])

    def to_dict(self) -> dict:
        def ordered(m):
            return sorted(m, key=m.__getitem__)
        return {"users": ordered(self.users), "pois": ordered(self.pois),
                "types": ordered(self.types), "poi_types": list(self.poi_types)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Catalog":
        return cls({u: i for i, u in enumerate(d["users"])},
                   {p: i for i, p in enumerate(d["pois"])},
                   {t: i for i, t in enumerate(d["types"])},
                   tuple(int(t) for t in d["poi_types"]))


class InputTuple(NamedTuple):
    user: int
    hour: int
    day: int
    dist_bucket: int
    poi: int
    poi_type: int


@dataclass
class ModelState:
    params: dict[str, np.ndarray]
    hp: HyperParams

    @property
    def fusion_alpha(self) -> float:
        return self.hp.fusion_alpha

    @property
    def n_layers(self) -> int:
        return len(self.hp.mlp_layers) + 1

    def copy(self) -> "ModelState":
        return ModelState({k: v.copy() for k, v in self.params.items()}, self.hp)


@dataclass
class Examples:
    """Encoded training examples: ``Z`` is (n, 6) int, ``y`` is 0/1 float."""

    Z: np.ndarray
    y: np.ndarray = field(default=None)

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.int64).reshape(-1, 6)
        self.y = (np.zeros(len(self.Z)) if self.y is None
                  else np.asarray(self.y, dtype=np.float64).reshape(-1))
        if len(self.y) != len(self.Z):
            raise NcfError("labels and inputs differ in length")

    def __len__(self):
        return len(self.Z)

    def __add__(self, other: "Examples") -> "Examples":
        return Examples(np.vstack([self.Z, other.Z]), np.concatenate([self.y, other.y]))


# -- parameters ----------------------------------------------------------------

def layer_dims(hp: HyperParams) -> list[int]:
    return [5 * hp.embed_dim, *hp.mlp_layers, 1]


def param_shapes(hp: HyperParams, n_users: int, n_pois: int, n_types: int) -> dict[str, tuple]:
    e = hp.embed_dim
    shapes = {"user": (n_users, e), "poi": (n_pois + 1, e), "hour": (24, e), "day": (7, e),
              "dist": (hp.distance_buckets, e), "type": (n_types, e)}
    dims = layer_dims(hp)
    for i in range(1, len(dims)):
        shapes[f"W{i}"] = (dims[i - 1], dims[i])
        shapes[f"b{i}"] = (dims[i],)
    shapes["aux"] = (4,)
    return shapes


def init_model(hp: HyperParams, n_users: int, n_pois: int, n_types: int) -> ModelState:
    """Uniform(-0.05, 0.05) weights and embeddings, zero biases."""
    if min(n_users, n_pois, n_types) < 1:
        raise NcfError("catalog sizes must be positive")
    rng = np.random.default_rng(hp.seed)
    params = {}
    for name, shape in param_shapes(hp, n_users, n_pois, n_types).items():
        if name.startswith("b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
    return ModelState(params, hp)


def zero_model(hp: HyperParams, n_users: int, n_pois: int, n_types: int) -> ModelState:
    shapes = param_shapes(hp, n_users, n_pois, n_types)
    return ModelState({k: np.zeros(s) for k, s in shapes.items()}, hp)


def check_state(state: ModelState) -> None:
    p = state.params
    n_users, n_pois1, n_types = p["user"].shape[0], p["poi"].shape[0], p["type"].shape[0]
    expected = param_shapes(state.hp, n_users, n_pois1 - 1, n_types)
    if set(expected) != set(p):
        raise NcfError(f"parameter groups {sorted(p)} != {sorted(expected)}")
    for k, s in expected.items():
        if p[k].shape != s:
            raise NcfError(f"{k} has shape {p[k].shape}, expected {s}")


# -- encoding ------------------------------------------------------------------------

def distance_bucket(travel_km: float, n_buckets: int) -> int:
    if not travel_km > 0:
        return 0
    return int(min(max(math.floor(math.log2(1.0 + travel_km)), 0), n_buckets - 1))


def encode_input(record: StaypointRecord, features: VisitFeatures, catalog: Catalog,
                 distance_buckets: int = 10, strict: bool = True,
                 venue_type: str | None = None) -> InputTuple:
    """Map a visit to embedding indices; unknown POIs get the reserved row
    unless ``strict``."""
    if record.user_id not in catalog.users:
        raise NcfError(f"unknown user {record.user_id!r}")
    poi = catalog.pois.get(record.poi_id)
    if poi is None:
        if strict:
            raise NcfError(f"unknown poi {record.poi_id!r}")
        poi = catalog.unseen_poi
        ptype = catalog.type_index(venue_type or record.venue_type)
    else:
        ptype = catalog.poi_types[poi]
    return InputTuple(catalog.users[record.user_id], features.hour, features.day_of_week,
                      distance_bucket(features.travel_km, distance_buckets), poi, ptype)


def encode_dataset(dataset: TrajectoryDataset, catalog: Catalog, hp: HyperParams,
                   strict: bool = False) -> Examples:
    """Every record of ``dataset`` as a positive example."""
    rows = []
    for u in dataset.users:
        traj = dataset.trajectories[u]
        if not traj.records:
            continue
        feats = derive_features(traj)
        for r, f in zip(traj.records, feats):
            vtype = dataset.poi_catalog.get(r.poi_id, (None, r.venue_type))[1]
            rows.append(encode_input(r, f, catalog, hp.distance_buckets, strict, vtype))
    Z = np.array(rows, dtype=np.int64).reshape(-1, 6)
    return Examples(Z, np.ones(len(Z)))


def sample_negatives(train: VisitMatrix, k_per_positive: int, rng_seed: int,
                     positive_users: Sequence[int] | None = None,
                     context_pool: np.ndarray | None = None) -> Examples:
    """Draw ``k_per_positive`` unvisited POIs for every positive.

    Positives are given as matrix row indices (one entry per positive
    example); by default one per non-zero cell. Each negative keeps the
    positive's user, picks a POI uniformly among that user's zero cells and
    gets a uniform hour and weekday with distance bucket 0. If
    ``context_pool`` (rows of hour, day, bucket) is given, the context is
    instead copied from a uniformly drawn row, so it carries no label signal.
    """
    counts = train.counts.toarray()
    if not (counts == 0).any():
        raise NcfError("matrix is fully dense: no negatives to sample")
    if positive_users is None:
        rows, _ = np.nonzero(counts)
    else:
        rows = np.asarray(positive_users, dtype=np.int64)
    per_user = np.bincount(rows, minlength=counts.shape[0])
    catalog = Catalog.from_matrix(train)
    col_type = np.asarray(catalog.poi_types, dtype=np.int64)
    rng = np.random.default_rng(rng_seed)
    chunks = []
    for u in np.flatnonzero(per_user):
        free = np.flatnonzero(counts[u] == 0)
        n = int(per_user[u]) * k_per_positive
        if free.size == 0:
            log.warning("user row %d has no unvisited POI; no negatives drawn", u)
            continue
        pois = free[rng.integers(0, free.size, size=n)]
        z = np.empty((n, 6), dtype=np.int64)
        z[:, USER] = u
        if context_pool is None:
            z[:, HOUR] = rng.integers(0, 24, size=n)
            z[:, DAY] = rng.integers(0, 7, size=n)
            z[:, DIST] = 0
        else:
            z[:, [HOUR, DAY, DIST]] = context_pool[rng.integers(0, len(context_pool), size=n)]
        z[:, POI] = pois
        z[:, TYPE] = col_type[pois]
        chunks.append(z)
    Z = np.vstack(chunks) if chunks else np.zeros((0, 6), dtype=np.int64)
    return Examples(Z, np.zeros(len(Z)))


# -- forward / backward ---------------------------------------------------------------

def _act(x, kind):
    return np.maximum(x, 0.0) if kind == "relu" else np.tanh(x)


def _act_grad(pre, post, kind):
    return (pre > 0).astype(pre.dtype) if kind == "relu" else 1.0 - post * post


def _lookup(params, Z):
    return (params["user"][Z[:, USER]], params["poi"][Z[:, POI]], params["hour"][Z[:, HOUR]],
            params["day"][Z[:, DAY]], params["dist"][Z[:, DIST]], params["type"][Z[:, TYPE]])


def forward(state: ModelState, Z: np.ndarray, keep_cache: bool = False):
    """Raw (pre-sigmoid) scores for a batch; returns (mlp, gmf, fused[, cache])."""
    p = state.params
    Z = np.asarray(Z, dtype=np.int64).reshape(-1, 6)
    u, q, h, d, l, t = _lookup(p, Z)
    x = np.concatenate([u, q, h, d, l], axis=1)
    if x.shape[1] != p["W1"].shape[0]:
        raise NcfError(f"input width {x.shape[1]} != W1 rows {p['W1'].shape[0]}")
    pres, posts = [], [x]
    a = x
    L = state.n_layers
    for i in range(1, L + 1):
        z = a @ p[f"W{i}"] + p[f"b{i}"]
        a = _act(z, state.hp.activation) if i < L else z
        pres.append(z)
        posts.append(a)
    mlp = a[:, 0]
    aux_feats = np.stack([h.mean(axis=1), d.mean(axis=1), l.mean(axis=1), t.mean(axis=1)], axis=1)
    gmf = np.einsum("ij,ij->i", u, q) + aux_feats @ p["aux"]
    alpha = state.fusion_alpha
    fused = alpha * gmf + (1.0 - alpha) * mlp
    if keep_cache:
        return mlp, gmf, fused, (Z, (u, q, h, d, l, t), aux_feats, pres, posts)
    return mlp, gmf, fused


def forward_mlp(state: ModelState, z: InputTuple) -> float:
    return float(forward(state, np.array([z]))[0][0])


def forward_gmf(state: ModelState, z: InputTuple) -> float:
    return float(forward(state, np.array([z]))[1][0])


def fuse(mlp_score, gmf_score, alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise NcfError("alpha must lie in [0, 1]")
    return alpha * gmf_score + (1.0 - alpha) * mlp_score


def bce_with_logits(s: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, s) - y * s))


def sigmoid(s):
    """Numerically stable logistic function."""
    s = np.asarray(s, dtype=np.float64)
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def loss_and_grads(state: ModelState, Z: np.ndarray, y: np.ndarray):
    """Mean BCE over the batch and its gradient for every parameter group."""
    p = state.params
    mlp, gmf, fused, cache = forward(state, Z, keep_cache=True)
    Z, (u, q, h, d, l, t), aux_feats, pres, posts = cache
    n = len(Z)
    loss = bce_with_logits(fused, y)
    g = (sigmoid(fused) - y) / n
    alpha = state.fusion_alpha
    g_gmf = alpha * g
    delta = ((1.0 - alpha) * g)[:, None]

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    L = state.n_layers
    for i in range(L, 0, -1):
        grads[f"W{i}"] = posts[i - 1].T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        delta = delta @ p[f"W{i}"].T
        if i > 1:
            delta = delta * _act_grad(pres[i - 2], posts[i - 1], state.hp.activation)
    e = p["user"].shape[1]
    dx_u, dx_q, dx_h, dx_d, dx_l = (delta[:, k * e:(k + 1) * e] for k in range(5))

    grads["aux"] = aux_feats.T @ g_gmf
    aux = p["aux"]
    gu = dx_u + g_gmf[:, None] * q
    gq = dx_q + g_gmf[:, None] * u
    gh = dx_h + (g_gmf * aux[0] / e)[:, None]
    gd = dx_d + (g_gmf * aux[1] / e)[:, None]
    gl = dx_l + (g_gmf * aux[2] / e)[:, None]
    gt = np.broadcast_to((g_gmf * aux[3] / e)[:, None], (n, e))
    for name, col, grad in (("user", USER, gu), ("poi", POI, gq), ("hour", HOUR, gh),
                            ("day", DAY, gd), ("dist", DIST, gl), ("type", TYPE, gt)):
        kernels.scatter_add_rows(grads[name], Z[:, col], np.ascontiguousarray(grad))
    return loss, grads


# -- training --------------------------------------------------------------------------

def train(state: ModelState, data: Examples, hp: HyperParams | None = None):
    """Mini-batch SGD on binary cross-entropy; returns (new state, epoch losses).

    The input state is not modified. Raises :class:`TrainingDiverged` on a
    non-finite loss.
    """
    hp = hp or state.hp
    if len(data) == 0:
        raise NcfError("no training examples")
    check_state(state)
    state = ModelState({k: v.copy() for k, v in state.params.items()}, hp)
    rng = np.random.default_rng([hp.seed, 1])
    velocity = {k: np.zeros_like(v) for k, v in state.params.items()} if hp.momentum else None
    trace = []
    n = len(data)
    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            loss, grads = loss_and_grads(state, data.Z[idx], data.y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch}, batch starting {start}; "
                    f"lower learning_rate (now {hp.learning_rate})")
            total += loss * len(idx)
            for k, g in grads.items():
                if velocity is not None:
                    velocity[k] = hp.momentum * velocity[k] - hp.learning_rate * g
                    state.params[k] += velocity[k]
                else:
                    state.params[k] -= hp.learning_rate * g
        trace.append(total / n)
        log.debug("epoch %d loss %.6f", epoch, trace[-1])
    return state, trace


# -- prediction ------------------------------------------------------------------------

def _mode(values: Sequence[int], default: int) -> int:
    if not values:
        return default
    c = Counter(values)
    top = max(c.values())
    return min(v for v, n in c.items() if n == top)


def feature_context(train: TrajectoryDataset, hp: HyperParams) -> dict[str, tuple[int, int, int]]:
    """Per-user (modal hour, modal weekday, bucket of median travel) from train.

    Users without train visits fall back to the population context.
    """
    ctx, all_h, all_d, all_km = {}, [], [], []
    for u in train.users:
        feats = derive_features(train.trajectories[u])
        if not feats:
            continue
        hours = [f.hour for f in feats]
        days = [f.day_of_week for f in feats]
        km = [f.travel_km for f in feats]
        all_h += hours
        all_d += days
        all_km += km
        ctx[u] = (_mode(hours, 0), _mode(days, 0),
                  distance_bucket(float(np.median(km)), hp.distance_buckets))
    fallback = (_mode(all_h, 0), _mode(all_d, 0),
                distance_bucket(float(np.median(all_km)) if all_km else 0.0, hp.distance_buckets))
    for u in train.users:
        ctx.setdefault(u, fallback)
    return ctx


def predict_expected_matrix(state: ModelState, catalog: Catalog, users: Sequence[str],
                            pois: Sequence[str],
                            feature_defaults: Mapping[str, tuple[int, int, int]],
                            poi_types: Mapping[str, str] | None = None) -> np.ndarray:
    """Raw fused score for every (user, poi) cell, scored in the user's
    typical visit context."""
    poi_types = poi_types or {}
    pidx = np.array([catalog.pois.get(p, catalog.unseen_poi) for p in pois], dtype=np.int64)
    tidx = np.array([catalog.poi_types[i] if i < catalog.n_pois
                     else catalog.type_index(poi_types.get(p, UNKNOWN_TYPE))
                     for p, i in zip(pois, pidx)], dtype=np.int64)
    out = np.zeros((len(users), len(pois)))
    m = len(pois)
    for r, u in enumerate(users):
        if u not in catalog.users:
            raise NcfError(f"unknown user {u!r}")
        hour, day, bucket = feature_defaults[u]
        Z = np.empty((m, 6), dtype=np.int64)
        Z[:, USER] = catalog.users[u]
        Z[:, HOUR] = hour
        Z[:, DAY] = day
        Z[:, DIST] = bucket
        Z[:, POI] = pidx
        Z[:, TYPE] = tidx
        out[r] = forward(state, Z)[2]
    return out


# -- checkpoints -----------------------------------------------------------------------

def save_checkpoint(path, state: ModelState, catalog: Catalog,
                    metadata: Mapping | None = None) -> None:
    """JSON checkpoint; ``metadata`` (e.g. the split time) is stored verbatim."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "metadata": dict(metadata or {}),
        "hyperparams": {**asdict(state.hp), "mlp_layers": list(state.hp.mlp_layers)},
        "catalog": catalog.to_dict(),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                   for k, v in sorted(state.params.items())},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path, with_metadata: bool = False):
    """(state, catalog), or (state, catalog, metadata) with ``with_metadata``."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise NcfError(f"unsupported checkpoint format {doc.get('format')!r}")
    hp = HyperParams.from_dict(doc["hyperparams"])
    params = {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"])
              for k, v in doc["params"].items()}
    state = ModelState(params, hp)
    check_state(state)
    catalog = Catalog.from_dict(doc["catalog"])
    if with_metadata:
        return state, catalog, doc.get("metadata", {})
    return state, catalog
