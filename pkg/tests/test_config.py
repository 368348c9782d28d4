import pytest

from mnnrg.config import DEFAULTS, config_hash, load_config
from mnnrg.errors import ConfigError


def write(tmp_path, text):
    path = tmp_path / "c.toml"
    path.write_text(text)
    return path


def test_defaults_carry_standard_settings():
    cfg = load_config()
    assert cfg["plant"]["dt"] == 0.01
    assert cfg["governor"]["j_star"] == 500
    assert cfg["governor"]["L"] == 15
    assert cfg["governor"]["epsilon"] == 0.05
    assert cfg["collect"]["profile"] != cfg["tune"]["profile"]


def test_file_overrides_defaults(tmp_path):
    path = write(tmp_path, '[governor]\nL = 8\n[profiles.extra]\nkind = "steps"\nlevels = [1.0]\ndurations = [5]\n')
    cfg = load_config(path)
    assert cfg["governor"]["L"] == 8
    assert cfg["governor"]["j_star"] == 500
    assert "extra" in cfg["profiles"] and "train" in cfg["profiles"]


def test_programmatic_overrides_win(tmp_path):
    path = write(tmp_path, "[run]\nseed = 3\n")
    assert load_config(path, {"run": {"seed": 9}})["run"]["seed"] == 9


@pytest.mark.parametrize("text", [
    "[nonsense]\na = 1\n",
    "[governor]\nLL = 3\n",
    "[governor]\nsolver_mode = 'newton'\n",
    "[plant]\nkind = 'boiler'\n",
    "[collect]\nprofile = 'missing'\n",
    "[profiles.bad]\nkind = 'steps'\nlevels = [1.0]\n",
    "[mnnrg]\nmbar = [0.0]\nrbar = [0.0]\n",
    "this is not toml",
])
def test_bad_configs_raise(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, text))


def test_missing_file_raises(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")


def test_hash_is_stable_and_sensitive():
    a = load_config()
    b = load_config()
    assert config_hash(a) == config_hash(b)
    c = load_config(None, {"run": {"seed": 1}})
    assert config_hash(a) != config_hash(c)
    assert DEFAULTS["run"]["seed"] == 0
