"""Command-line entry point: ``trajsurprise <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import matrix, ncf, pipeline, scoring
from .pipeline import ConfigError, ExperimentConfig
from .synthgen import (INTENSITIES, Scenario, generate_scenario, merged_dataset, read_labels,
                       write_labels, write_manifest)
from .trajectory import format_timestamp, read_dataset, write_dataset

log = logging.getLogger("trajsurprise")

# (flag, config attribute, type) for options shared by several subcommands
_EXPERIMENT_FLAGS = [
    ("--model", "model", str), ("--data", "data", str), ("--labels", "labels", str),
    ("--t-split", "t_split", str), ("--train-fraction", "train_fraction", float),
    ("--surprise", "surprise", str), ("--aggregation", "aggregation", str),
    ("--matrix-mode", "matrix_mode", str), ("--ncf-output", "ncf_output", str),
    ("--svd-k", "svd_k", int), ("--svd-method", "svd_method", str),
    ("--iforest-trees", "iforest_trees", int), ("--iforest-subsample", "iforest_subsample", int),
    ("--recall-k", "recall_k", int),
]
_SCENARIO_FLAGS = [
    ("--agents", "n_agents", int), ("--train-days", "train_days", int),
    ("--test-days", "test_days", int), ("--anomaly-fraction", "anomaly_fraction", float),
    ("--intensity", "intensity", str), ("--imposter-pairs", "imposter_pairs", int),
    ("--pois", "n_pois", int),
]
_NCF_FLAGS = [
    ("--embed-dim", "embed_dim", int), ("--activation", "activation", str),
    ("--fusion-alpha", "fusion_alpha", float), ("--negatives", "negatives_per_positive", int),
    ("--lr", "learning_rate", float), ("--epochs", "epochs", int),
    ("--batch-size", "batch_size", int), ("--distance-buckets", "distance_buckets", int),
    ("--momentum", "momentum", float), ("--negative-context", "negative_context", str),
]


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.replace(";", ",").split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _add_flags(p, table, group_title):
    g = p.add_argument_group(group_title)
    for flag, dest, typ in table:
        g.add_argument(flag, dest=dest, type=typ, default=None)
    return g


def _add_common(p):
    p.add_argument("--seed", type=int, default=None, help="master seed for all randomness")
    p.add_argument("--config", default=None, help="INI config file (see README)")


def _add_ncf_flags(p):
    g = _add_flags(p, _NCF_FLAGS, "NCF hyperparameters")
    g.add_argument("--mlp-layers", dest="mlp_layers", type=_int_list, default=None)


def _add_scenario_flags(p):
    g = _add_flags(p, _SCENARIO_FLAGS, "synthetic scenario")
    g.add_argument("--kinds", dest="kinds", type=_str_list, default=None)


def _add_experiment_flags(p):
    g = _add_flags(p, _EXPERIMENT_FLAGS, "experiment")
    g.add_argument("--source", choices=pipeline.SOURCES, default=None)
    g.add_argument("--ks", type=_int_list, default=None)
    g.add_argument("--type-surprise", dest="type_surprise", action="store_true", default=None)
    g.add_argument("--no-type-surprise", dest="type_surprise", action="store_false")


def _overrides(args, table, extra=()) -> dict:
    names = [dest for _, dest, _ in table] + list(extra)
    return {k: getattr(args, k) for k in names
            if hasattr(args, k) and getattr(args, k) is not None}


def build_config(args) -> ExperimentConfig:
    """Config file first, then explicit flags on top."""
    cfg = pipeline.load_config(args.config) if args.config else ExperimentConfig()
    scen = _overrides(args, _SCENARIO_FLAGS, ["kinds"])
    if scen:
        cfg = replace(cfg, scenario=replace(cfg.scenario, **scen))
    hp = _overrides(args, _NCF_FLAGS, ["mlp_layers"])
    if hp:
        cfg = replace(cfg, hp=replace(cfg.hp, **hp))
    top = _overrides(args, _EXPERIMENT_FLAGS, ["source", "ks", "type_surprise"])
    if getattr(args, "seed", None) is not None:
        top["seed"] = args.seed
    if top.get("data") and "source" not in top:
        top["source"] = "file"
    return replace(cfg, **top)


def _split_for(cfg: ExperimentConfig):
    if cfg.source != "file":
        raise ConfigError("this subcommand needs --data")
    split, labels, meta = pipeline.load_data(cfg)
    return split, labels, meta


# -- subcommands ------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    schema = dict(kv.split("=", 1) for kv in args.column) if args.column else None
    ds = read_dataset(args.input, schema, args.delimiter)
    print(f"users: {len(ds.users)}")
    print(f"records: {ds.n_records()}")
    print(f"pois: {len(ds.poi_catalog)}")
    print(f"malformed rows: {len(ds.parse_issues)}")
    for issue in ds.parse_issues[:args.show_issues]:
        print(f"  line {issue.line}: {issue.reason}", file=sys.stderr)
    if ds.n_records() == 0:
        raise ConfigError("no valid records in input")
    if args.output:
        write_dataset(ds, args.output)
    if args.matrix_prefix:
        m = matrix.build_matrix(ds, args.mode)
        matrix.export_matrix(m, f"{args.matrix_prefix}.coo", f"{args.matrix_prefix}.json")
    return 0


def cmd_synth(args) -> int:
    cfg = build_config(args)
    labeled = generate_scenario(cfg.scenario, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(merged_dataset(labeled), out / "data.csv")
    write_labels(labeled.labels, out / "labels.csv")
    manifest = dict(labeled.manifest)
    manifest["t_split_iso"] = format_timestamp(labeled.split.t_split)
    write_manifest(manifest, out / "manifest.json")
    n_anom = sum(1 for lab in labeled.labels.values() if lab.anomalous)
    print(f"wrote {out / 'data.csv'} ({len(labeled.labels)} agents, {n_anom} anomalous)")
    print(f"t_split: {manifest['t_split_iso']}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    split, _, meta = _split_for(cfg)
    train_m, _ = pipeline.visit_matrices(split, cfg.matrix_mode)
    hp = replace(cfg.hp, seed=cfg.seed)
    state, catalog, trace = pipeline.fit_ncf(split, train_m, hp)
    ncf.save_checkpoint(args.checkpoint, state, catalog,
                        {"t_split": format_timestamp(split.t_split), "data": meta.get("data")})
    print(f"epochs: {len(trace)}  final loss: {trace[-1]:.6f}")
    print(f"checkpoint: {args.checkpoint}")
    return 0


def cmd_score(args) -> int:
    cfg = build_config(args)
    if args.checkpoint:
        state, catalog, meta = ncf.load_checkpoint(args.checkpoint, with_metadata=True)
        if cfg.t_split is None and meta.get("t_split"):
            cfg = replace(cfg, t_split=meta["t_split"])
        cfg = replace(cfg, model="ncf")
    elif cfg.model == "ncf":
        raise ConfigError("scoring with model=ncf needs --checkpoint (see `train`)")
    split, labels, data_meta = _split_for(cfg)
    train_m, test_m = pipeline.visit_matrices(split, cfg.matrix_mode)
    if args.checkpoint:
        expected = pipeline.ncf_expected(state, catalog, split, test_m, cfg.ncf_output)
        report = pipeline.surprise_report("ncf", expected, split, test_m, cfg)
    elif cfg.model == "svd":
        k = min(cfg.svd_k, min(train_m.shape))
        fact = matrix.truncated_svd(train_m, k, cfg.svd_method, cfg.seed)
        report = pipeline.surprise_report("svd", matrix.reconstruct(fact), split, test_m, cfg)
    else:
        report = pipeline.baseline_report(cfg.model, split, cfg)
    result = pipeline.evaluate_report(report, labels, cfg.ks, cfg.recall_k) if labels else None
    pipeline.write_outputs(Path(args.out), cfg, report, result, labels, data_meta)
    print((Path(args.out) / "summary.txt").read_text(encoding="utf-8"), end="")
    return 0


def cmd_eval(args) -> int:
    with open(args.report, encoding="utf-8") as fh:
        report = pipeline.AnomalyReport.from_dict(json.load(fh))
    labels = read_labels(args.labels)
    ks = args.ks or ExperimentConfig.ks
    result = pipeline.evaluate_report(report, labels, ks, args.recall_k)
    doc = result.to_dict()
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _fmt_matrix(rows, users, pois, width=8) -> str:
    head = " " * 8 + "".join(f"{p[:width - 1]:>{width}}" for p in pois)
    lines = [head]
    for u, row in zip(users, rows):
        lines.append(f"{u[:7]:<8}" + "".join(f"{v:>{width}.2f}" for v in row))
    return "\n".join(lines)


def cmd_demo_svd(args) -> int:
    cfg = ExperimentConfig(model="svd", source="demo",
                           svd_k=args.k, svd_method=args.method,
                           surprise=args.surprise, aggregation=args.aggregation,
                           seed=args.seed if args.seed is not None else 0,
                           output_dir=args.out)
    report, _ = pipeline.run_experiment(cfg)
    m = report.matrices
    users, pois = m["users"], m["pois"]
    for title, key in (("train (counts)", "train"), ("test (visited)", "test"),
                       (f"expected, rank {m['k']}", "expected"),
                       (f"surprise ({cfg.surprise})", "surprise")):
        print(f"== {title}")
        print(_fmt_matrix(np.asarray(m[key], dtype=float), users, pois))
    print("== ranking")
    for row in report.rows:
        print(f"{row['rank']:>3}  {row['user_id']:<8} {row['total']:.4f}")
    return 0


def cmd_run(args) -> int:
    cfg = build_config(args)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    report, result = pipeline.run_experiment(cfg)
    if cfg.output_dir:
        print((Path(cfg.output_dir) / "summary.txt").read_text(encoding="utf-8"), end="")
    else:
        for u, s, r in report.ranking[:10]:
            print(f"{r:>4}  {u}  {s:.6f}")
        if result is not None and result.auc is not None:
            print(f"AUC: {result.auc:.4f}")
    return 0


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajsurprise",
        description="Surprise-based anomaly detection on semantic trajectories.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a check-in file and report statistics")
    p.add_argument("--input", required=True)
    p.add_argument("--output", help="write the normalized dataset here")
    p.add_argument("--matrix-prefix", help="also export the User-POI matrix as PREFIX.coo/.json")
    p.add_argument("--mode", choices=(matrix.BINARY, matrix.COUNT), default=matrix.BINARY)
    p.add_argument("--delimiter", default=",")
    p.add_argument("--column", action="append", metavar="FIELD=NAME",
                   help="override a header name, e.g. user_id=uid")
    p.add_argument("--show-issues", type=int, default=10)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a labeled synthetic scenario")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    _add_scenario_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the NCF model on the train period")
    p.add_argument("--checkpoint", required=True)
    _add_common(p)
    _add_experiment_flags(p)
    _add_ncf_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score users with a checkpoint or a reference model")
    p.add_argument("--checkpoint", help="NCF checkpoint from `train`")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    _add_experiment_flags(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="evaluate a report against labels")
    p.add_argument("--report", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--ks", type=_int_list, default=None)
    p.add_argument("--recall-k", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("demo-svd", help="walk through the bundled 5x8 SVD example")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--method", choices=("deterministic", "randomized"), default="deterministic")
    p.add_argument("--surprise", choices=tuple(scoring.SURPRISES), default=scoring.ABS)
    p.add_argument("--aggregation", choices=tuple(scoring.AGGREGATIONS), default=scoring.SUM)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_demo_svd)

    p = sub.add_parser("run", help="full pipeline: data, model, surprise, ranking, metrics")
    p.add_argument("--out", help="output directory")
    _add_common(p)
    _add_experiment_flags(p)
    _add_scenario_flags(p)
    _add_ncf_flags(p)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        print(f"trajsurprise {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
