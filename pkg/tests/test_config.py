from __future__ import annotations

import json

import pytest

from survflow import config


def test_defaults_round_trip():
    cfg = config.RunConfig()
    again = config.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


def test_preset_supplies_architecture_and_explicit_keys_win():
    cfg = config.from_dict({"schema_version": 1, "data": {"dataset": "whas"}, "model": {"K": 4}})
    dyn = cfg.dynamics(6)
    assert dyn.K == 4 and dyn.pi_size == 12 and dyn.g_depth == 3 and dyn.n_features == 6


def test_unknown_dataset_uses_dynamics_defaults():
    cfg = config.from_dict({"schema_version": 1, "data": {"dataset": "mine"}})
    assert cfg.dynamics(2).n_features == 2


@pytest.mark.parametrize("doc, msg", [
    ({}, "schema_version"),
    ({"schema_version": 2}, "unsupported"),
    ({"schema_version": 1, "extra": {}}, "unknown section"),
    ({"schema_version": 1, "train": {"lr": 1}}, "unknown key"),
    ({"schema_version": 1, "model": {"width": 3}}, "unknown key"),
    ({"schema_version": 1, "train": {"learning_rate": -1}}, "train"),
    ({"schema_version": 1, "eval": {"risk": "median"}}, "risk"),
    ({"schema_version": 1, "portfolio": {"experiment": {"colour": 1}}}, "portfolio.experiment"),
    ([], "object"),
])
def test_invalid_configs(doc, msg):
    with pytest.raises(config.ConfigError, match=msg):
        config.from_dict(doc)


def test_invalid_model_reported_on_dynamics():
    cfg = config.from_dict({"schema_version": 1, "model": {"K": 0}})
    with pytest.raises(config.ConfigError, match="model"):
        cfg.dynamics(3)


def test_load_reports_position(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"schema_version": 1,\n  "data": {,}}')
    with pytest.raises(config.ConfigError, match=r"c.json:2:\d+"):
        config.load(p)
    p.write_text(json.dumps({"schema_version": 1, "train": {"max_epochs": 3}}))
    assert config.load(p).train.max_epochs == 3
