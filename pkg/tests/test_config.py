import json

import pytest

from featsent.config import ExperimentConfig, load_config, parse_config
from featsent.errors import ConfigError


def test_minimal_config_fills_defaults():
    cfg = parse_config({"dataset": {"name": "synthetic"}, "attacks": [{"attack": "fgsm"}]})
    assert cfg.detector.gram_set == [1, 2, 3, 4] and cfg.detector.instances_per_gram == 100
    assert cfg.trainer.epochs == 10 and cfg.trainer.lr == 1e-4
    assert cfg.taps == ["BN1", "Res1", "Res2", "Res3", "Res4"]
    assert cfg.attack("fgsm").spec(0).params["eps"] == 0.1
    assert cfg.dataset.sizes() == (49_000, 1_000, 10_000)


def test_unknown_key_names_its_path():
    with pytest.raises(ConfigError, match="trainer.epochz"):
        parse_config({"trainer": {"epochz": 3}})


@pytest.mark.parametrize(
    "data",
    [
        {"taps": ["Res9"]},
        {"attacks": [{"attack": "fgsm"}, {"attack": "fgsm"}]},
        {"attacks": [{"attack": "pgd", "params": {"alpha": 1.0}}]},
        {"dataset": {"name": "mnist"}},
        {"evaluation": {"sigmas": [1.5]}},
        {"detector": {"gram_set": [2, 2]}},
    ],
)
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        parse_config(data)


def test_hash_is_stable_across_loads_and_formats(tmp_path):
    toml = tmp_path / "a.toml"
    toml.write_text('name = "x"\n[dataset]\nname = "synthetic"\nsubset = 100\n')
    a, b = load_config(toml), load_config(toml)
    assert a.hash() == b.hash()
    js = tmp_path / "a.json"
    js.write_text(json.dumps({"name": "x", "dataset": {"name": "synthetic", "subset": 100}}))
    assert load_config(js).hash() == a.hash()
    assert parse_config({**a.to_dict(), "seed": 1}).hash() != a.hash()


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("name = \n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_seed_fanout_is_per_label():
    cfg = ExperimentConfig(seed=3)
    assert cfg.seed_for("attack/pgd") == cfg.seed_for("attack/pgd")
    assert cfg.seed_for("attack/pgd") != cfg.seed_for("attack/fgsm")
    assert cfg.seed_for("attack/pgd") != ExperimentConfig(seed=4).seed_for("attack/pgd")
