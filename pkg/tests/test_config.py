import json

import pytest

from spinodal_kbnn import config
from spinodal_kbnn.config import ConfigError, ExperimentConfig, from_dict, load


def test_defaults():
    cfg = load(None)
    assert cfg == ExperimentConfig()
    assert cfg.simulation.nx == 61 and cfg.training.beta == 0.01


def test_partial_override_and_round_trip():
    cfg = from_dict({"simulation": {"steps": 100, "discard": 10}, "training": {"mnn_hidden": [8, 8]}})
    assert cfg.simulation.steps == 100 and cfg.simulation.dt == 2e-9
    assert cfg.training.mnn_hidden == (8, 8)
    assert from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize(
    "doc, match",
    [
        ({"simulaton": {}}, "unknown section"),
        ({"simulation": {"stepz": 3}}, "unknown key"),
        ({"simulation": {"steps": 1.5}}, "integer"),
        ({"simulation": {"steps": 10, "discard": 10}}, "steps > discard"),
        ({"training": {"beta": -0.1}}, "non-negative"),
        ({"training": {"mnn_image": "both"}}, "mnn_image"),
        ({"features": {"include_outer_boundary": 1}}, "true/false"),
        ({"search": {"n_hl": 3}}, "list"),
    ],
)
def test_invalid_documents(doc, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(doc)


def test_env_var_and_file_errors(tmp_path, monkeypatch):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seeds": {"master": 9}}))
    monkeypatch.setenv(config.ENV_VAR, str(p))
    assert load().seeds.master == 9
    with pytest.raises(ConfigError, match="not found"):
        load(tmp_path / "missing.json")
    p.write_text("{")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load(p)
