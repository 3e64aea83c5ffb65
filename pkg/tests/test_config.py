import pytest
import yaml

from graphmetro.config import PRESETS, ConfigError, config_from_dict, load_config


def write(tmp_path, doc):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(doc))
    return str(p)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_validate(name):
    cfg = load_config(name)
    assert cfg.validate() == []
    assert cfg.transform_set().K == 5


def test_preset_override_merges(tmp_path):
    cfg = load_config(write(tmp_path, {"preset": "synthetic-graph", "train": {"epochs": 3}}))
    assert cfg.train.epochs == 3
    assert cfg.train.learning_rate == PRESETS["synthetic-graph"]["train"]["learning_rate"]
    assert cfg.model.hidden_dim == PRESETS["synthetic-graph"]["model"]["hidden_dim"]


def test_hash_ignores_output_and_seeds_but_tracks_settings():
    a = config_from_dict({"preset": "synthetic-node"})
    b = config_from_dict({"preset": "synthetic-node", "output_dir": "elsewhere", "seeds": [9]})
    c = config_from_dict({"preset": "synthetic-node", "train": {"lam": 0.5}})
    assert a.hash() == b.hash() != c.hash()


def test_all_problems_are_enumerated(tmp_path):
    doc = {
        "preset": "synthetic-node",
        "methods": ["graphmetro", "irm"],
        "transforms": {"kinds": ["drop_edge", "warp"]},
        "train": {"learning_rate": -1.0, "lam": -2.0},
        "split": [0.5, 0.5, 0.5],
    }
    with pytest.raises(ConfigError) as err:
        load_config(write(tmp_path, doc))
    msgs = err.value.problems
    assert len(msgs) == 5
    assert any("irm" in m for m in msgs) and any("warp" in m for m in msgs)


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(write(tmp_path, {"preset": "synthetic-node", "modle": {}}))
    with pytest.raises(ConfigError, match="model.depth"):
        load_config(write(tmp_path, {"preset": "synthetic-node", "model": {"depth": 3}}))


def test_missing_config_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="config not found"):
        load_config(str(tmp_path / "none.yaml"))


def test_excluded_transform_domain_and_k(tmp_path):
    doc = {"preset": "synthetic-node", "transforms": {"kinds": ["drop_edge"], "k": 2,
                                                      "param_domains": {"drop_edge": [0.9, 0.1]}}}
    with pytest.raises(ConfigError) as err:
        load_config(write(tmp_path, doc))
    assert len(err.value.problems) >= 2


def test_dataset_path_must_exist(tmp_path):
    doc = {"task_kind": "graph", "dataset_path": "nowhere"}
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(write(tmp_path, doc))
