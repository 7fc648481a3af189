import json

import pytest

from wsireport.config import ConfigError, RunConfig, apply_overrides, dump_config, load_config


def test_defaults_match_published_settings():
    cfg = RunConfig()
    assert cfg.model.encoder.region_size == 96
    assert cfg.model.encoder.d_model == cfg.model.decoder.d_model == 512
    assert cfg.model.encoder.d_in == 1024
    assert (cfg.model.decoder.layers, cfg.model.decoder.heads, cfg.model.decoder.beam_size) == (3, 8, 3)
    assert (cfg.model.cmc.memory_size, cfg.model.cmc.num_prototypes) == (2048, 64)
    assert (cfg.train.learning_rate, cfg.train.epoch_decay, cfg.train.weight_decay) == (1e-4, 0.8, 0.0)
    assert cfg.data.split_ratios == (0.8, 0.1, 0.1)
    assert cfg.finetune.survival_bins == 4 and cfg.finetune.monte_carlo_folds == 5
    assert cfg.model.arm == "cmc_lgh"


def test_default_round_trip():
    cfg = RunConfig()
    assert RunConfig.model_validate(json.loads(dump_config(cfg))) == cfg


def test_yaml_file_and_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 3\ntrain:\n  epochs: 7\nmodel:\n  arm: base\n")
    cfg = load_config(p, ["train.learning_rate=0.01", "model.encoder.region_size=16"])
    assert cfg.train.epochs == 7 and cfg.train.learning_rate == 0.01
    assert cfg.model.encoder.region_size == 16 and cfg.model.arm == "base"
    # sections inherit the run seed unless set explicitly
    assert cfg.train.seed == cfg.finetune.seed == cfg.synth.seed == 3
    assert load_config(p, ["train.seed=9"]).train.seed == 9


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="train.epochz"):
        load_config(None, ["train.epochz=3"])
    with pytest.raises(ConfigError, match="invalid config key"):
        load_config(None, ["bogus=1"])
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no-equals-sign"])
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        load_config(None, ["model.encoder.heads=5"])  # 512 not divisible by 5
    with pytest.raises(ConfigError):
        load_config(None, ["data.split_ratios=[0.5, 0.2, 0.2]"])
    with pytest.raises(ConfigError):
        load_config(None, ["model.decoder.d_model=256"])  # encoder/decoder widths disagree
    with pytest.raises(ConfigError):
        load_config(None, ["train.epoch_decay=1.5"])
