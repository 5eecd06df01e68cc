import json

import pytest

from hlora_asr.config import RunConfig
from hlora_asr.errors import ConfigError


def test_defaults():
    cfg = RunConfig()
    assert (cfg.model.n_layers, cfg.model.k, cfg.model.d_model, cfg.model.heads) == (6, 3, 32, 4)
    assert (cfg.lora.rank, cfg.lora.alpha) == (4, 8.0)
    assert cfg.lora_config().scale == 2.0
    assert cfg.train.lambda_lid == 0.3 and cfg.train.lr == 1e-3
    assert (cfg.train.epochs_phase1, cfg.train.epochs_phase2, cfg.train.epochs_adapt) == (10, 40, 30)
    assert cfg.unit_types() == {0: "word", 1: "word", 2: "char"}


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match=r"model\.depth"):
        RunConfig.from_dict({"model": {"depth": 3}})
    with pytest.raises(ConfigError, match=r"data\.shift\.x"):
        RunConfig.from_dict({"data": {"shift": {"x": 1}}})


def test_invalid_values_rejected():
    for doc in ({"model": {"k": 6}}, {"lora": {"rank": 0}}, {"train": {"lambda_lid": 2}}, {"ablation_k": [0]}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(doc)


def test_round_trip_and_hash(tmp_path):
    cfg = RunConfig.from_dict({"seed": 4, "model": {"k": 2}})
    path = tmp_path / "c.json"
    path.write_text(cfg.dumps())
    back = RunConfig.load(path)
    assert back == cfg and back.hash == cfg.hash
    assert RunConfig().hash != cfg.hash
    assert cfg.replace(seed=5).hash != cfg.hash


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  \"seed\": ,\n}")
    with pytest.raises(ConfigError, match="line 2"):
        RunConfig.load(bad)
    assert RunConfig.load(None) == RunConfig()


def test_derived_objects():
    cfg = RunConfig()
    src, tgt, tok = cfg.languages()
    mc = cfg.model_config(tok.vocab_size)
    assert mc.vocab_size == tok.vocab_size == 108
    assert cfg.model_config(tok.vocab_size, k=1).k == 1
    assert len(src) == len(tgt) == 3
    assert all(s.noise_std * 1.5 == t.noise_std for s, t in zip(src, tgt))
    assert cfg.to_dict() == json.loads(cfg.dumps())
