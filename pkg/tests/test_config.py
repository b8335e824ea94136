import pytest

from attractorsep.config import (
    ENV_PREFIX,
    REGISTRY,
    echo_config,
    load_config_file,
    resolve,
)
from attractorsep.errors import ConfigError


def test_defaults_resolve_without_inputs():
    cfg = resolve(env={})
    assert cfg.seed == 0
    assert cfg.k == 2
    assert cfg.metric == "spherical"
    assert cfg.lr_schedule == ((150, 3.0), (225, 10.0), (300, 30.0), (325, 100.0))


def test_file_then_env_then_flags_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("epochs=10\nseed=1\nmetric=euclidean\n")
    env = {ENV_PREFIX + "SEED": "2", "UNRELATED": "x"}
    cfg = resolve(f, overrides={"epochs": "20"}, env=env)
    assert cfg.metric == "euclidean"  # file
    assert cfg.seed == 2  # env beats file
    assert cfg.epochs == 20  # flag beats everything


def test_unknown_key_rejected_everywhere(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("optimizer=sgd\n")
    with pytest.raises(ConfigError):
        resolve(f, env={})
    with pytest.raises(ConfigError):
        resolve(env={ENV_PREFIX + "OPTIMIZER": "sgd"})
    with pytest.raises(ConfigError):
        resolve(env={}, overrides={"optimizer": "sgd"})


def test_bad_value_reports_key():
    with pytest.raises(ConfigError, match="epochs"):
        resolve(env={}, overrides={"epochs": "ten"})
    with pytest.raises(ConfigError, match="metric"):
        resolve(env={}, overrides={"metric": "manhattan"})


def test_list_and_schedule_parsing():
    cfg = resolve(env={}, overrides={"k_set": "2,3", "lr_schedule": "10:3,20:10"})
    assert cfg.k_set == (2, 3)
    assert cfg.lr_schedule == ((10, 3.0), (20, 10.0))
    assert resolve(env={}, overrides={"lr_schedule": ""}).lr_schedule == ()


def test_config_file_comments_and_blanks(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("# comment\n\nepochs=5  # trailing\n")
    assert load_config_file(f) == {"epochs": "5"}
    g = tmp_path / "bad.cfg"
    g.write_text("epochs 5\n")
    with pytest.raises(ConfigError):
        load_config_file(g)


def test_echo_round_trips(tmp_path):
    cfg = resolve(env={}, overrides={"k_set": "2,3", "epochs": "7",
                                     "lr_schedule": "5:3"})
    path = tmp_path / "resolved.txt"
    echo_config(cfg, path)
    back = resolve(path, env={})
    for key in REGISTRY:
        assert getattr(back, key) == getattr(cfg, key), key


def test_replace_validates_keys():
    cfg = resolve(env={})
    assert cfg.replace(epochs=3).epochs == 3
    with pytest.raises(ConfigError):
        cfg.replace(bogus=1)
