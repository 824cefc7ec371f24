import csv

import pytest
import yaml

from dilo import cli
from dilo.config import DEFAULTS, ConfigError, RunConfig

SMALL = {
    "env": {"name": "gridworld"},
    "data": {"n_expert_offline": 3, "n_subopt_offline": 6, "n_expert_obs": 2, "horizon": 12},
    "dilo": {"steps": 60, "batch_size": 64, "log_every": 10},
    "eval": {"n_episodes": 10, "reference_episodes": 10},
}


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv("DILO_OUTPUT_ROOT", str(tmp_path / "out"))
    return tmp_path


def write_cfg(root, doc, name="c.yaml"):
    p = root / name
    p.write_text(yaml.safe_dump(doc))
    return str(p)


def run(*argv):
    return cli.main(list(argv))


def test_pipeline_end_to_end(root, capsys):
    doc = {**SMALL, "output_dir": "run"}
    cfg = write_cfg(root, doc)
    assert run("gen-data", "--config", cfg) == 0
    assert run("train", "--config", cfg) == 0
    out = root / "out" / "run"
    assert run("eval", "--config", cfg, "--ckpt", str(out / "checkpoint.npz")) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[-2].startswith("mean_return,normalized_score")
    assert run("diagnose", "--ckpt", str(out / "checkpoint.npz"), "--data", str(out / "data" / "offline.jsonl")) == 0
    rows = list(csv.DictReader(open(out / "diagnose.csv")))
    assert rows and set(rows[0]) == {"triple", "w", "implied_reward", "residual"}
    assert float(rows[0]["implied_reward"]) == -float(rows[0]["residual"])
    assert {p.name for p in out.iterdir()} >= {"config.resolved.yaml", "train_metrics.csv", "checkpoint.npz",
                                               "results.csv", "diagnose.csv", "data"}


def test_resolved_config_has_every_default(root):
    cfg = write_cfg(root, {**SMALL, "output_dir": "echo"})
    assert run("gen-data", "--config", cfg) == 0
    frozen = yaml.safe_load(open(root / "out" / "echo" / "config.resolved.yaml"))
    assert set(frozen) == set(DEFAULTS)
    assert set(frozen["dilo"]) == set(DEFAULTS["dilo"])
    assert frozen["dilo"]["steps"] == 60 and frozen["dilo"]["tau"] == 3.0
    assert RunConfig.from_dict(frozen).resolved() == frozen


def test_metrics_are_byte_identical_across_runs(root):
    paths = []
    for name in ("a", "b"):
        cfg = write_cfg(root, {**SMALL, "output_dir": name}, f"{name}.yaml")
        assert run("gen-data", "--config", cfg) == 0
        assert run("train", "--config", cfg) == 0
        assert run("eval", "--config", cfg, "--ckpt", str(root / "out" / name / "checkpoint.npz")) == 0
        paths.append(root / "out" / name)
    for f in ("train_metrics.csv", "results.csv"):
        assert (paths[0] / f).read_bytes() == (paths[1] / f).read_bytes()


def test_oracle_check(root, capsys):
    cfg = write_cfg(root, {"oracle": {"instances": 3}, "output_dir": "oracle"})
    assert run("oracle-check", "--config", cfg) == 0
    rows = list(csv.DictReader(open(root / "out" / "oracle" / "oracle.csv")))
    assert len(rows) == 3 and all(float(r["gap"]) <= 2e-3 for r in rows)


def test_unknown_key_is_config_error(root, capsys):
    cfg = write_cfg(root, {"dilo": {"stepz": 3}})
    assert run("train", "--config", cfg) == cli.EXIT_CONFIG
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("dilo-error code=2 kind=ConfigError")
    with pytest.raises(ConfigError, match="unknown key 'nope'"):
        RunConfig.from_dict({"nope": 1})
    with pytest.raises(ConfigError, match="data.bogus"):
        RunConfig.from_dict({"data": {"bogus": 1}})


@pytest.mark.parametrize("doc", [{"dilo": {"gamma": 2.0}}, {"eval": {"n_episodes": 0}}, {"data": {"horizon": -1}},
                                 {"env": {"name": "maze"}}, [1, 2]])
def test_invalid_values(root, doc):
    assert run("gen-data", "--config", write_cfg(root, doc)) == cli.EXIT_CONFIG


def test_unparseable_config(root, capsys):
    p = root / "bad.yaml"
    p.write_text("env: [unclosed\n")
    assert run("train", "--config", str(p)) == cli.EXIT_CONFIG
    assert len(capsys.readouterr().err.strip().splitlines()) == 1


def test_missing_files(root):
    assert run("train", "--config", str(root / "nope.yaml")) == cli.EXIT_MISSING
    cfg = write_cfg(root, {**SMALL, "output_dir": "empty"})
    assert run("train", "--config", cfg) == cli.EXIT_MISSING
    assert run("eval", "--config", cfg, "--ckpt", str(root / "x.npz")) == cli.EXIT_MISSING


def test_divergence_exit_code(root, capsys):
    doc = {**SMALL, "dilo": {"approximator": "mlp", "value_lr": 1.0, "steps": 300}, "output_dir": "div"}
    cfg = write_cfg(root, doc)
    assert run("gen-data", "--config", cfg) == 0
    assert run("train", "--config", cfg) == cli.EXIT_DIVERGED
    assert "kind=DivergenceError" in capsys.readouterr().err


def test_malformed_dataset_exit_code(root):
    cfg = write_cfg(root, {**SMALL, "output_dir": "bad"})
    assert run("gen-data", "--config", cfg) == 0
    (root / "out" / "bad" / "data" / "offline.jsonl").write_text("{broken\n")
    assert run("train", "--config", cfg) == cli.EXIT_DATA


def test_help_documents_exit_codes(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for code in ("0  success", "2  bad command line", "3  a required file", "4  training diverged", "5  dataset"):
        assert code in text
    assert "DILO_OUTPUT_ROOT" in text


def test_output_root_only_prefixes_relative_dirs(tmp_path, monkeypatch):
    monkeypatch.setenv("DILO_OUTPUT_ROOT", "/somewhere")
    assert str(RunConfig.from_dict({"output_dir": "r"}).output_dir) == "/somewhere/r"
    assert str(RunConfig.from_dict({"output_dir": str(tmp_path)}).output_dir) == str(tmp_path)
