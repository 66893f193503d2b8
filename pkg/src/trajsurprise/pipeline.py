"""End-to-end experiment: data -> split -> model -> surprise -> rank -> metrics."""

from __future__ import annotations

import configparser
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import baselines, matrix, ncf, scoring
from .evaluation import EvalResult, evaluate
from .synthgen import Label, LabeledDataset, Scenario, generate_scenario, read_labels
from .trajectory import (SplitDataset, TrajectoryDataset, parse_timestamp, quantile_split_time,
                         read_dataset, split_train_test)

log = logging.getLogger(__name__)

MODELS = ("ncf", "svd", "iforest", "ecod")
SOURCES = ("synth", "file", "demo")
NCF_OUTPUTS = ("probability", "raw")


def experiment_hyperparams() -> ncf.HyperParams:
    """Training settings used by experiments; plain SGD from the small
    uniform init stalls at the base-rate loss, so momentum is on. Small
    populations give few batches per epoch, hence the longer schedule."""
    return ncf.HyperParams(learning_rate=0.05, momentum=0.9, epochs=80)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: str = "ncf"
    source: str = "synth"
    data: str | None = None
    labels: str | None = None
    t_split: str | None = None
    train_fraction: float = 0.8
    scenario: Scenario = field(default_factory=Scenario)
    hp: ncf.HyperParams = field(default_factory=experiment_hyperparams)
    ncf_output: str = "probability"
    surprise: str = scoring.NEW_POI
    aggregation: str = scoring.SUM
    type_surprise: bool = False
    matrix_mode: str = matrix.BINARY
    svd_k: int = 3
    svd_method: str = "randomized"
    iforest_trees: int = 100
    iforest_subsample: int = 256
    ks: tuple[int, ...] = (10, 100, 150)
    recall_k: int | None = None
    seed: int = 42
    output_dir: str | None = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.source not in SOURCES:
            raise ConfigError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.source == "file" and not self.data:
            raise ConfigError("source=file needs a data path")
        self.ks = tuple(int(k) for k in self.ks)
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("K values must be positive")
        if self.surprise not in scoring.SURPRISES:
            raise ConfigError(f"unknown surprise variant {self.surprise!r}")
        if self.aggregation not in scoring.AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.ncf_output not in NCF_OUTPUTS:
            raise ConfigError(f"ncf_output must be one of {NCF_OUTPUTS}")
        if self.matrix_mode not in (matrix.BINARY, matrix.COUNT):
            raise ConfigError(f"unknown matrix mode {self.matrix_mode!r}")
        if self.svd_k is not None and self.svd_k < 1:
            raise ConfigError("svd_k must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ks"] = list(self.ks)
        d["hp"]["mlp_layers"] = list(self.hp.mlp_layers)
        d["scenario"]["kinds"] = list(self.scenario.kinds)
        return d


# -- config files ----------------------------------------------------------------------

def _coerce(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        items = [t.strip() for t in text.replace(";", ",").split(",") if t.strip()]
        if like and isinstance(like[0], int):
            return tuple(int(t) for t in items)
        return tuple(items)
    if text.lower() in ("", "none", "null"):
        return None
    return text


def _typed_update(obj, values: Mapping[str, str]):
    names = {f.name for f in fields(obj)}
    kw = {}
    for key, raw in values.items():
        key = key.replace("-", "_")
        if key not in names:
            raise ConfigError(f"unknown key {key!r} for {type(obj).__name__}")
        current = getattr(obj, key)
        if key in ("n_pois", "recall_k"):
            kw[key] = None if raw.strip().lower() in ("", "none") else int(raw)
        elif key == "train_fraction":
            kw[key] = float(raw)
        else:
            kw[key] = _coerce(raw, current)
    return replace(obj, **kw)


def load_config(path) -> ExperimentConfig:
    """INI file with an ``[experiment]`` section and optional ``[scenario]``
    and ``[ncf]`` sections; keys are the dataclass field names."""
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise ConfigError(f"cannot read config {path}")
    cfg = ExperimentConfig()
    if cp.has_section("scenario"):
        cfg = replace(cfg, scenario=_typed_update(cfg.scenario, dict(cp["scenario"])))
    if cp.has_section("ncf"):
        cfg = replace(cfg, hp=_typed_update(cfg.hp, dict(cp["ncf"])))
    if cp.has_section("experiment"):
        cfg = _typed_update(cfg, dict(cp["experiment"]))
    return cfg


# -- report ------------------------------------------------------------------------------

@dataclass
class AnomalyReport:
    model: str
    rows: list[dict]
    matrices: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)

    @property
    def ranking(self) -> list[tuple[str, float, int]]:
        return [(r["user_id"], r["total"], r["rank"]) for r in self.rows]

    def to_dict(self) -> dict:
        d = {"model": self.model, "users": self.rows}
        if self.matrices:
            d["matrices"] = self.matrices
        if self.training:
            d["training"] = self.training
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "AnomalyReport":
        return cls(d["model"], list(d["users"]), d.get("matrices", {}), d.get("training", {}))


def build_report(model: str, totals: Mapping[str, float],
                 components: Mapping[str, scoring.UserScore] | None = None,
                 cold_start: frozenset[str] = frozenset()) -> AnomalyReport:
    rows = []
    for user, total, rank in scoring.rank_users(totals):
        c = components.get(user) if components else None
        rows.append({
            "user_id": user,
            "matrix_surprise": c.matrix_surprise if c else None,
            "type_surprise": c.type_surprise if c else None,
            "total": total,
            "rank": rank,
            "cold_start": user in cold_start,
        })
    return AnomalyReport(model, rows)


def _dump(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- stages ------------------------------------------------------------------------------

def load_data(cfg: ExperimentConfig) -> tuple[SplitDataset, dict[str, Label] | None, dict]:
    if cfg.source == "synth":
        labeled = generate_scenario(cfg.scenario, cfg.seed)
        return labeled.split, dict(labeled.labels), dict(labeled.manifest)
    dataset = read_dataset(cfg.data)
    if dataset.parse_issues:
        log.warning("%d malformed rows skipped", len(dataset.parse_issues))
    t_split = (parse_timestamp(cfg.t_split) if cfg.t_split
               else quantile_split_time(dataset, cfg.train_fraction))
    labels = read_labels(cfg.labels) if cfg.labels else None
    meta = {"data": os.path.basename(cfg.data), "t_split": t_split,
            "malformed_rows": len(dataset.parse_issues)}
    return split_train_test(dataset, t_split), labels, meta


def visit_matrices(split: SplitDataset, mode: str):
    users = split.users
    pois = sorted(split.train.poi_catalog)
    return (matrix.build_matrix(split.train, mode, users, pois),
            matrix.build_matrix(split.test, mode, users, pois))


def fit_ncf(split: SplitDataset, train_m: matrix.VisitMatrix, hp: ncf.HyperParams):
    """Train the NCF model on the train period; returns (state, catalog, trace)."""
    catalog = ncf.Catalog.from_matrix(train_m)
    pos = ncf.encode_dataset(split.train, catalog, hp)
    pool = pos.Z[:, [ncf.HOUR, ncf.DAY, ncf.DIST]] if hp.negative_context == "empirical" else None
    neg = ncf.sample_negatives(train_m, hp.negatives_per_positive, hp.seed,
                               positive_users=pos.Z[:, ncf.USER], context_pool=pool)
    state = ncf.init_model(hp, catalog.n_users, catalog.n_pois, catalog.n_types)
    state, trace = ncf.train(state, pos + neg, hp)
    return state, catalog, trace


def ncf_expected(state, catalog, split: SplitDataset, test_m: matrix.VisitMatrix,
                 output: str = "raw") -> np.ndarray:
    """Expected matrix from a trained model, as raw fused scores or mapped
    through the logistic function onto the [0, 1] visit scale."""
    ctx = ncf.feature_context(split.train, state.hp)
    types = {p: t for p, (_, t) in split.train.poi_catalog.items()}
    raw = ncf.predict_expected_matrix(state, catalog, test_m.user_ids, test_m.poi_ids, ctx, types)
    return ncf.sigmoid(raw) if output == "probability" else raw


def surprise_report(model: str, expected: np.ndarray, split: SplitDataset,
                    test_m: matrix.VisitMatrix, cfg: ExperimentConfig) -> AnomalyReport:
    scores = scoring.score_users(expected, test_m, split.train, split.test, cfg.surprise,
                                 cfg.aggregation, cfg.type_surprise, split.cold_start_users)
    comps = {s.user_id: s for s in scores}
    return build_report(model, {s.user_id: s.total for s in scores}, comps,
                        split.cold_start_users)


def baseline_report(model: str, split: SplitDataset, cfg: ExperimentConfig) -> AnomalyReport:
    vectors, cold = baselines.featurize_users(split)
    if model == "iforest":
        totals = baselines.iforest_fit_score(vectors, cfg.iforest_trees, cfg.iforest_subsample,
                                             cfg.seed)
    else:
        totals = baselines.ecod_score(vectors)
    return build_report(model, totals, None, cold)


def run_demo(cfg: ExperimentConfig) -> AnomalyReport:
    demo = matrix.load_demo()
    k = demo["k"] if cfg.svd_k is None else cfg.svd_k
    train_m = matrix.matrix_from_dense(demo["train"], matrix.COUNT, demo["column_types"],
                                       demo["users"], demo["pois"])
    test_m = matrix.matrix_from_dense(demo["test"], matrix.BINARY, demo["column_types"],
                                      demo["users"], demo["pois"])
    expected = matrix.reconstruct(matrix.truncated_svd(train_m, k, cfg.svd_method, cfg.seed))
    s = scoring.surprise(expected, test_m, cfg.surprise)
    per_user = scoring.AGGREGATIONS[cfg.aggregation](s, demo["users"])
    comps = {u: scoring.UserScore(u, per_user[u], 0.0, cfg.aggregation) for u in demo["users"]}
    report = build_report("svd", per_user, comps)
    report.matrices = {"users": demo["users"], "pois": demo["pois"],
                       "train": demo["train"].tolist(), "test": demo["test"].tolist(),
                       "expected": np.round(expected, 6).tolist(),
                       "surprise": np.round(s, 6).tolist(), "k": k}
    return report


def run_experiment(cfg: ExperimentConfig) -> tuple[AnomalyReport, EvalResult | None]:
    """Run one configured experiment and, if ``output_dir`` is set, write
    report.json, eval.json, ranking.csv, manifest.json and summary.txt."""
    hp = replace(cfg.hp, seed=cfg.seed)
    labels, meta = None, {}
    if cfg.source == "demo":
        if cfg.model != "svd":
            raise ConfigError("the bundled demo matrix is only scored with model=svd")
        report = run_demo(cfg)
    else:
        split, labels, meta = load_data(cfg)
        train_m, test_m = visit_matrices(split, cfg.matrix_mode)
        if cfg.model == "ncf":
            state, catalog, trace = fit_ncf(split, train_m, hp)
            report = surprise_report("ncf", ncf_expected(state, catalog, split, test_m,
                                                         cfg.ncf_output), split, test_m, cfg)
            report.training = {"loss_trace": [float(x) for x in trace]}
        elif cfg.model == "svd":
            k = min(cfg.svd_k, min(train_m.shape))
            fact = matrix.truncated_svd(train_m, k, cfg.svd_method, cfg.seed)
            report = surprise_report("svd", matrix.reconstruct(fact), split, test_m, cfg)
        else:
            report = baseline_report(cfg.model, split, cfg)
    result = None
    if labels:
        result = evaluate(report.ranking, labels, cfg.ks, cfg.recall_k)
    if cfg.output_dir:
        write_outputs(Path(cfg.output_dir), cfg, report, result, labels, meta)
    return report, result


def write_outputs(out: Path, cfg: ExperimentConfig, report: AnomalyReport,
                  result: EvalResult | None, labels, meta) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _dump(report.to_dict(), out / "report.json")
    # the output location does not affect results; keep reruns elsewhere identical
    config = {k: v for k, v in cfg.to_dict().items() if k != "output_dir"}
    _dump({"config": config, "data": meta}, out / "manifest.json")
    with open(out / "ranking.csv", "w", encoding="utf-8") as fh:
        fh.write("rank,user_id,score,label\n")
        for u, s, r in report.ranking:
            lab = labels.get(u) if labels else None
            tag = f"{lab.kind}/{lab.intensity}" if lab is not None and lab.anomalous else (
                "normal" if lab is not None else "")
            fh.write(f"{r},{u},{s!r},{tag}\n")
    lines = [f"model: {report.model}", f"users: {len(report.rows)}"]
    if result is not None:
        _dump(result.to_dict(), out / "eval.json")
        lines.append(f"anomalous: {result.n_anomalous}")
        lines.append("AUC: " + ("n/a" if result.auc is None else f"{result.auc:.4f}"))
        for k, v in sorted(result.top_k_hits.items()):
            lines.append(f"top-{k} hits: {v}")
        for (kind, inten), v in sorted(result.recall_by_category.items()):
            lines.append(f"recall@{result.recall_k} {kind}/{inten}: {v:.3f}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def evaluate_report(report: AnomalyReport, labels: Mapping[str, Label], ks, recall_k=None):
    return evaluate(report.ranking, labels, ks, recall_k)
