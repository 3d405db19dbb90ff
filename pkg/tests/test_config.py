import pytest

from factorcast import config as cf


def test_empty_file_gives_full_defaults(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text("")
    cfg = cf.load_config(p)
    assert cfg.train.learning_rate == 1e-3
    assert cfg.model.representation_size == 16
    assert cfg.model.rnn_hidden == 16
    assert cfg.model.fc_hidden == 16
    assert cfg.model.dropout == 0.1
    assert cfg.train.weights.alpha == 0.4
    assert cfg.train.weights.beta == 1.0
    assert cfg.train.weights.gamma == 0.3
    assert cfg.eval.zetas == [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]


def test_negative_alpha_rejected(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("train:\n  alpha: -1\n")
    with pytest.raises(cf.ConfigError) as exc:
        cf.load_config(p)
    assert "alpha" in str(exc.value)


def test_unknown_key_rejected_with_path(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("train:\n  laerning_rate: 0.001\n")
    with pytest.raises(cf.ConfigError) as exc:
        cf.load_config(p)
    assert "train.laerning_rate" in str(exc.value)


def test_type_mismatch_rejected(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("sim:\n  n_patients: lots\n")
    with pytest.raises(cf.ConfigError) as exc:
        cf.load_config(p)
    assert "sim.n_patients" in str(exc.value)


def test_roundtrip_dump_load(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text("seed: 11\nsim:\n  zeta: 0.3\n  n_patients: 50\n"
                 "train:\n  learning_rate: 0.002\n  gamma: 0.25\n"
                 "model:\n  architecture: hg-t\n")
    cfg = cf.load_config(p)
    dumped = tmp_path / "dumped.yaml"
    dumped.write_text(cf.dump_config(cfg))
    cfg2 = cf.load_config(dumped)
    assert cf.config_to_dict(cfg) == cf.config_to_dict(cfg2)
    assert cf.config_hash(cfg) == cf.config_hash(cfg2)
    assert cfg2.sim.zeta == 0.3
    assert cfg2.train.weights.gamma == 0.25
    assert cfg2.model.architecture == "hg-t"


def test_seed_propagates_to_sections(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text("seed: 7\n")
    cfg = cf.load_config(p)
    assert cfg.sim.seed == 7 and cfg.train.seed == 7
    cfg.apply_seed(9)
    assert cfg.sim.seed == 9 and cfg.train.seed == 9


def test_config_hash_differs_on_semantic_change():
    c1 = cf.config_from_dict({"sim": {"zeta": 0.2}})
    c2 = cf.config_from_dict({"sim": {"zeta": 0.3}})
    assert cf.config_hash(c1) != cf.config_hash(c2)
    c3 = cf.config_from_dict({"sim": {"zeta": 0.2}})
    assert cf.config_hash(c1) == cf.config_hash(c3)


def test_mmd_bandwidth_accepts_median_or_number(tmp_path):
    cfg = cf.config_from_dict({"train": {"mmd_bandwidth": 0.5}})
    assert cfg.train.mmd_bandwidth == 0.5
    cfg = cf.config_from_dict({"train": {"mmd_bandwidth": "median"}})
    assert cfg.train.mmd_bandwidth == "median"
    with pytest.raises(cf.ConfigError):
        cf.config_from_dict({"train": {"mmd_bandwidth": "auto"}})


def test_invariant_violations_rejected():
    with pytest.raises(cf.ConfigError):
        cf.config_from_dict({"train": {"learning_rate": 0.5}})
    with pytest.raises(cf.ConfigError):
        cf.config_from_dict({"sim": {"zeta": 1.5}})
    with pytest.raises(cf.ConfigError):
        cf.config_from_dict({"eval": {"plan_family": "greedy"}})
    with pytest.raises(cf.ConfigError):
        cf.config_from_dict({"model": {"dropout": 0.9}})
