import json
import subprocess
import sys
from dataclasses import replace

import pytest

from trajsurprise import pipeline
from trajsurprise.cli import main
from trajsurprise.pipeline import ConfigError, ExperimentConfig, load_config, run_experiment
from trajsurprise.synthgen import Scenario

TINY_DATA = ["--agents", "30", "--train-days", "5", "--test-days", "3", "--seed", "5"]
TINY = [*TINY_DATA, "--epochs", "2"]
TINY_SCENARIO = Scenario(n_agents=30, train_days=5, test_days=3)


def _read(path):
    return path.read_bytes()


# -- configuration ---------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(model="lstm")
    with pytest.raises(ConfigError):
        ExperimentConfig(ks=(0,))
    with pytest.raises(ConfigError):
        ExperimentConfig(source="file")
    with pytest.raises(ConfigError):
        ExperimentConfig(surprise="squared")


def test_load_config_sections(tmp_path):
    path = tmp_path / "exp.ini"
    path.write_text("[experiment]\nmodel = svd\nks = 5, 10\ntype_surprise = yes\n"
                    "[scenario]\nn_agents = 40\nkinds = work, social\n"
                    "[ncf]\nepochs = 3\nmlp_layers = 8, 4\n")
    cfg = load_config(path)
    assert cfg.model == "svd" and cfg.ks == (5, 10) and cfg.type_surprise is True
    assert cfg.scenario.n_agents == 40 and cfg.scenario.kinds == ("work", "social")
    assert cfg.hp.epochs == 3 and cfg.hp.mlp_layers == (8, 4)
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\ncolour = red\n")
    with pytest.raises(ConfigError):
        load_config(bad)


# -- pipeline ---------------------------------------------------------------------------

def test_demo_workflow():
    report, result = run_experiment(ExperimentConfig(model="svd", source="demo",
                                                     svd_method="deterministic",
                                                     surprise="abs"))
    assert result is None
    m = report.matrices
    u1, house_b = m["users"].index("User 1"), m["pois"].index("House B")
    assert m["expected"][u1][house_b] == pytest.approx(2.530, abs=5e-3)
    assert len(report.rows) == 5 and [r["rank"] for r in report.rows] == [1, 2, 3, 4, 5]


@pytest.mark.parametrize("model", ["svd", "iforest", "ecod", "ncf"])
def test_every_model_runs_and_evaluates(model):
    hp = replace(pipeline.experiment_hyperparams(), epochs=2)
    cfg = ExperimentConfig(model=model, scenario=TINY_SCENARIO, seed=3, hp=hp)
    report, result = run_experiment(cfg)
    assert len(report.rows) == 30
    assert set(result.top_k_hits) == {10, 100, 150}
    assert result.n_anomalous == 3
    assert 0.0 <= result.auc <= 1.0


# -- command line -----------------------------------------------------------------------

def test_cli_synth_ingest_train_score_eval(tmp_path, capsys):
    data = tmp_path / "synth"
    assert main(["synth", "--out", str(data), *TINY_DATA]) == 0
    manifest = json.loads((data / "manifest.json").read_text())
    t_split = manifest["t_split_iso"]
    assert main(["ingest", "--input", str(data / "data.csv"), "--matrix-prefix",
                 str(tmp_path / "m")]) == 0
    out = capsys.readouterr().out
    assert "users: 30" in out and "malformed rows: 0" in out
    assert (tmp_path / "m.coo").exists() and (tmp_path / "m.json").exists()

    ckpt = tmp_path / "model.json"
    assert main(["train", "--data", str(data / "data.csv"), "--t-split", t_split,
                 "--checkpoint", str(ckpt), "--epochs", "2", "--seed", "5"]) == 0
    scored = tmp_path / "scored"
    assert main(["score", "--data", str(data / "data.csv"), "--checkpoint", str(ckpt),
                 "--labels", str(data / "labels.csv"), "--out", str(scored)]) == 0
    assert (scored / "report.json").exists() and (scored / "eval.json").exists()
    capsys.readouterr()
    assert main(["eval", "--report", str(scored / "report.json"),
                 "--labels", str(data / "labels.csv"), "--ks", "5,10"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc["top_k_hits"]) == {"5", "10"} and doc["n_anomalous"] == 3

    base = tmp_path / "ecod"
    assert main(["score", "--data", str(data / "data.csv"), "--t-split", t_split,
                 "--model", "ecod", "--out", str(base)]) == 0
    assert json.loads((base / "report.json").read_text())["model"] == "ecod"


def test_cli_demo_svd(capsys):
    assert main(["demo-svd"]) == 0
    out = capsys.readouterr().out
    assert "== expected, rank 3" in out and "== ranking" in out


def test_cli_run_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--out", str(a), *TINY]) == 0
    assert main(["run", "--out", str(b), *TINY]) == 0
    for name in ("report.json", "eval.json", "ranking.csv", "manifest.json", "summary.txt"):
        assert _read(a / name) == _read(b / name), name


def test_cli_run_with_config_file(tmp_path, capsys):
    cfg = tmp_path / "exp.ini"
    cfg.write_text("[experiment]\nmodel = iforest\nks = 3\n"
                   "[scenario]\nn_agents = 30\ntrain_days = 5\ntest_days = 3\n")
    assert main(["run", "--config", str(cfg), "--seed", "1"]) == 0
    assert "AUC:" in capsys.readouterr().out


def test_cli_errors_exit_nonzero(tmp_path, capsys):
    assert main(["ingest", "--input", str(tmp_path / "missing.csv")]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["run", "--model", "lstm"]) == 1
    assert "model must be one of" in capsys.readouterr().err
    assert main(["score", "--out", str(tmp_path / "o"), "--data", str(tmp_path / "x.csv")]) == 1
    empty = tmp_path / "empty.csv"
    empty.write_text("UserId,Latitude,Longitude,CheckinTime,LeavingTime,VenueType\n")
    assert main(["ingest", "--input", str(empty)]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_cli_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "trajsurprise.cli", "run", "--model", "lstm"],
                          capture_output=True, text=True)
    assert proc.returncode == 1 and "error" in proc.stderr
