import json

import pytest

from stillflow.config import RunConfig, preset
from stillflow.errors import ConfigError, IngestionError


def test_paper_defaults():
    cfg = preset("paper")
    assert cfg.compressor.latent_dim == 128
    assert (cfg.udit.layers, cfg.udit.embed_dim, cfg.udit.heads) == (12, 384, 6)
    assert cfg.train.lr == 2e-4
    assert cfg.flow.steps == 50
    a = cfg.adapters
    assert (a.rank, a.num_experts, a.top_k) == (8, 5, 3)
    assert cfg.compressor.kl_weight == 1e-4


def test_desk_preset_is_consistent():
    cfg = preset("desk")
    assert cfg.compressor.latent_dim == cfg.udit.latent_dim == 32
    assert cfg.flow.steps == 50


def test_round_trip_and_overlay(tmp_path):
    cfg = preset("desk")
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"flow": {"steps": 8}}))
    over = RunConfig.load(path, cfg)
    assert over.flow.steps == 8 and over.udit == cfg.udit


@pytest.mark.parametrize("doc", [{"nope": {}}, {"flow": {"stepz": 3}}, {"flow": 3},
                                 {"udit": {"latent_dim": 64}}, {"adapters": {"mode": "prefix"}}])
def test_rejections(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_load_errors(tmp_path):
    with pytest.raises(IngestionError):
        RunConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)
    with pytest.raises(ConfigError):
        preset("huge")
