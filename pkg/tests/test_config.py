"""Configuration defaults, file parsing, hashing, ablation flags."""

import pytest

from decpoi.config import (ExperimentConfig, combined_hash, configs_from_values,
                           load_configs, parse_ablations)
from decpoi.data import SynthConfig
from decpoi.exceptions import ConfigError


def test_defaults_match_reference_setup():
    cfg = ExperimentConfig()
    assert cfg.d == 32
    assert cfg.q == 30
    assert cfg.mu == 0.3
    assert cfg.epsilon == 0.1
    assert cfg.lr == 0.002
    assert cfg.dropout == 0.2
    assert cfg.batch == 16
    assert cfg.max_epochs == 50
    assert cfg.n_neg == cfg.n_cp == cfg.n_comb == 5
    assert cfg.n_cand == 200
    assert cfg.seq_cap == 200
    assert cfg.threshold_km == 10.0


def test_parse_ablations_strips_dashes():
    assert parse_ablations("-AN,-PP") == ("AN", "PP")
    assert parse_ablations("mim") == ("MIM",)


def test_unknown_ablation_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig(ablations=("XX",))


def test_privacy_flag_follows_pp_ablation():
    assert ExperimentConfig().privacy_enabled
    assert not ExperimentConfig(ablations=("PP",)).privacy_enabled


def test_config_file_roundtrip(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text(
        "# benchmark setup\n"
        "d = 16\n"
        "q = 10\n"
        "mu = 0.3\n"
        "epsilon = 1.0\n"
        "users = 50\n"
        "pois = 300\n"
        "clusters = 2\n"
        "seed = 7\n"
        "ablations = -GN\n")
    cfg, synth = load_configs(path)
    assert cfg.d == 16 and cfg.q == 10 and cfg.epsilon == 1.0
    assert cfg.ablations == ("GN",)
    assert synth.users == 50 and synth.pois == 300 and synth.seed == 7


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        configs_from_values({"latent": "32"})


def test_overrides_win_over_file_values():
    cfg, _ = configs_from_values({"d": "16"}, overrides={"d": 8})
    assert cfg.d == 8


def test_hash_stable_and_sensitive():
    cfg, synth = configs_from_values({"d": "16", "users": "20"})
    h1 = combined_hash(cfg, synth)
    h2 = combined_hash(*configs_from_values({"d": "16", "users": "20"}))
    assert h1 == h2
    h3 = combined_hash(*configs_from_values({"d": "8", "users": "20"}))
    assert h3 != h1
    # seed participates in the hash
    h4 = combined_hash(*configs_from_values({"d": "16", "users": "20", "seed": "1"}))
    assert h4 != h1


def test_workers_do_not_affect_hash():
    a = combined_hash(*configs_from_values({"workers": "1"}))
    b = combined_hash(*configs_from_values({"workers": "4"}))
    assert a == b
