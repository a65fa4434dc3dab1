import json

import pytest

from bwcp.config import ExperimentConfig, load_config, parse_config, parse_override
from bwcp.errors import ConfigError


def test_empty_document_gives_defaults():
    cfg = parse_config("{}")
    assert cfg == ExperimentConfig()
    assert (cfg.T, cfg.g, cfg.tau, cfg.delta) == (2, 0.1, 0.5, 0.05)
    assert (cfg.momentum, cfg.weight_decay) == (0.9, 1e-4)
    assert (cfg.lambda1, cfg.lambda2) == (4e-5, 8e-5)


def test_unknown_key_reports_line():
    text = '{\n  "T": 3,\n  "tua": 0.5\n}\n'
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.line == 3
    assert "tua" in str(err.value) and "line 3" in str(err.value)


def test_out_of_range_reports_line():
    with pytest.raises(ConfigError) as err:
        parse_config('{\n  "epochs": 1,\n  "g": 1.5\n}')
    assert err.value.line == 3


def test_wrong_type_rejected():
    with pytest.raises(ConfigError):
        parse_config('{"T": 2.5}')
    with pytest.raises(ConfigError):
        parse_config('{"lr": true}')


def test_malformed_json_line():
    with pytest.raises(ConfigError) as err:
        parse_config('{\n  "T": 2,\n  "g" 0.1\n}')
    assert err.value.line == 3


def test_top_level_must_be_object():
    with pytest.raises(ConfigError):
        parse_config("[1, 2]")


def test_topology_validation():
    with pytest.raises(ConfigError):
        parse_config(json.dumps({"topology": [{"kind": "plain"}]}))
    with pytest.raises(ConfigError):
        parse_config(json.dumps({"topology": [{"kind": "plain", "out": 4, "colour": 1}]}))


def test_round_trip_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(ExperimentConfig(T=3, seed=5).dumps())
    cfg = load_config(path, {"seed": 9, "lr": 0.5})
    assert (cfg.T, cfg.seed, cfg.lr) == (3, 9, 0.5)
    with pytest.raises(ConfigError):
        load_config(path, {"nope": 1})
    with pytest.raises(ConfigError):
        load_config(path, {"T": 0})


def test_effective_lambdas():
    cfg = ExperimentConfig(lambda_scale=10.0)
    assert cfg.effective_lambda1 == pytest.approx(4e-4)
    assert cfg.effective_lambda2 == pytest.approx(8e-4)


def test_parse_override():
    assert parse_override("lr=0.01") == ("lr", 0.01)
    assert parse_override("mask=ste") == ("mask", "ste")
    assert parse_override("lr_decay_epochs=[3,5]") == ("lr_decay_epochs", [3, 5])
    with pytest.raises(ConfigError):
        parse_override("lr")


@pytest.mark.parametrize("key", ["recalibrate_samples", "affine_lr_scale", "lambda_scale"])
def test_negative_training_knobs_rejected(key):
    with pytest.raises(ConfigError) as err:
        parse_config('{\n  "%s": -1\n}' % key)
    assert err.value.line == 2 and key in str(err.value)


def test_shipped_configs_load():
    from pathlib import Path
    for path in sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.json")):
        load_config(path)
