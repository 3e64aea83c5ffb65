import csv
import json

import pytest
import yaml

from graphmetro.cli import main

TINY = {
    "preset": "synthetic-graph",
    "synthetic": {"num_graphs": 40},
    "model": {"hidden_dim": 8, "num_layers": 1},
    "train": {"epochs": 2},
    "seeds": [0, 1],
    "evaluation": {"invariance_trials": 2, "invariance_samples": 4},
}


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return str(p)


def run(*argv):
    return main([str(a) for a in argv])


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


RESULT_FILES = [
    "history.csv", "env_results.csv", "environments.json",
    "invariance_matrix.csv", "invariance_matrix_norm.csv", "shift_report.json",
]


def full_run(cfg, out):
    for cmd in ("train", "evaluate", "invariance", "discover", "report"):
        assert run(cmd, "--config", cfg, "--out", out) == 0, cmd


def test_full_pipeline_artifacts(tiny, tmp_path, capsys):
    out = tmp_path / "o"
    full_run(tiny, out)
    d = out / "seed_1" / "graphmetro"
    for name in RESULT_FILES + ["checkpoint.pt", "timestamps.json", "env_results.png",
                                "invariance_matrix.png", "shift_report.png"]:
        assert (d / name).exists(), name
    env = rows(d / "env_results.csv")
    assert len(env) == 14 and {r["seed"] for r in env} == {"1"}
    h = env[0]["config_hash"]
    assert all(r["config_hash"] == h for r in rows(d / "history.csv"))
    assert json.loads((d / "shift_report.json").read_text())["config_hash"] == h
    summary = rows(out / "summary.csv")
    assert {"mean", "std", "mean±std", "p_value"} <= set(summary[0])
    assert [r["env"] for r in summary][-2:] == ["shifted", "all"]
    assert (out / "summary.png").exists()


def test_repeated_runs_give_identical_artifacts(tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    full_run(tiny, a)
    full_run(tiny, b)
    for seed in (0, 1):
        for name in RESULT_FILES:
            pa, pb = a / f"seed_{seed}" / "graphmetro" / name, b / f"seed_{seed}" / "graphmetro" / name
            assert pa.read_bytes() == pb.read_bytes(), name
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()


def test_evaluate_without_checkpoint(tiny, tmp_path, capsys):
    assert run("evaluate", "--config", tiny, "--out", tmp_path / "empty", "--seed", 0) == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_report_refuses_mismatched_hash(tiny, tmp_path, capsys):
    out = tmp_path / "o"
    for cmd in ("train", "evaluate"):
        assert run(cmd, "--config", tiny, "--out", out) == 0
    path = out / "seed_1" / "erm" / "env_results.csv"
    path.write_text(path.read_text().replace(rows(path)[0]["config_hash"], "deadbeef0000"))
    assert run("report", "--config", tiny, "--out", out) == 1
    assert "config hash mismatch" in capsys.readouterr().err


def test_checkpoint_from_other_config_rejected(tiny, tmp_path, capsys):
    out = tmp_path / "o"
    assert run("train", "--config", tiny, "--out", out, "--seed", 0, "--method", "erm") == 0
    other = tmp_path / "other.yaml"
    other.write_text(yaml.safe_dump({**TINY, "train": {"epochs": 2, "lam": 0.5}}))
    assert run("evaluate", "--config", other, "--out", out, "--seed", 0, "--method", "erm") == 1
    assert "different config" in capsys.readouterr().err


def test_config_errors_before_compute(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"preset": "synthetic-node", "methods": ["irm"], "train": {"epochs": 0}}))
    assert run("train", "--config", bad, "--out", tmp_path / "o") == 1
    err = capsys.readouterr().err
    assert "irm" in err and "epochs" in err
    assert not (tmp_path / "o").exists()
    assert run("train", "--config", tmp_path / "missing.yaml") == 2


def test_unknown_command():
    with pytest.raises(SystemExit) as e:
        main(["fly", "--config", "x"])
    assert e.value.code == 2


def test_gen_data(tiny, tmp_path):
    assert run("gen-data", "--config", tiny, "--out", tmp_path) == 0
    assert len((tmp_path / "data" / "graphs.jsonl").read_text().splitlines()) == 40


def test_dataset_path_config(tiny, tmp_path):
    assert run("gen-data", "--config", tiny, "--out", tmp_path) == 0
    cfg = dict(TINY)
    cfg.pop("preset")
    cfg.pop("synthetic")
    cfg.update(task_kind="graph", dataset_path="data", methods=["erm"], seeds=[0])
    p = tmp_path / "ondisk.yaml"
    p.write_text(yaml.safe_dump(cfg))
    assert run("train", "--config", p, "--out", tmp_path / "o") == 0
    assert run("evaluate", "--config", p, "--out", tmp_path / "o") == 0
