from pathlib import Path

import pytest

from tracedyn.config import EXPERIMENTS, ConfigError, load_config, parse_config

MINIMAL = """\
experiment = "conservation"
seed = 7

[system]
dim = 2
bosons = ["1"]
hamiltonian = "tr(p1 p1) + tr(q1 q1)"

[params]
dt = 1e-3
t_final = 1.0
"""


def test_minimal_conservation():
    cfg = parse_config(MINIMAL)
    assert cfg.experiment == "conservation"
    assert cfg.seed == 7
    assert cfg.param("dt") == 1e-3
    assert cfg.param("n_traj", 5) == 5
    assert str(cfg.hamiltonian_poly()) == str(parse_config(MINIMAL).hamiltonian_poly())


def test_hash_is_stable_and_ignores_output():
    a = parse_config(MINIMAL)
    b = parse_config(MINIMAL + '\n')
    c = parse_config('output = "x"\n' + MINIMAL)
    assert a.hash() == b.hash() == c.hash()
    assert a.hash() != parse_config(MINIMAL.replace("seed = 7", "seed = 8")).hash()


def test_misspelled_key_names_key_and_line():
    text = MINIMAL.replace("t_final", "t_finel")
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert "t_finel" in str(err.value)
    assert err.value.line == 11


def test_unknown_section_key():
    with pytest.raises(ConfigError, match="colour"):
        parse_config(MINIMAL + 'colour = "red"\n')


def test_odd_dim_with_lambda_rejected():
    text = 'experiment = "hbar"\n[system]\ndim = 3\n[params]\nlambda_hat = 1.0\n'
    with pytest.raises(ConfigError, match="N must be even") as err:
        parse_config(text)
    assert err.value.line == 5


@pytest.mark.parametrize(
    "text,fragment",
    [
        ('experiment = "teleport"\n', "unknown experiment"),
        ("seed = 1\n", "experiment"),
        ('experiment = "conservation"\n[system]\nhamiltonian = "tr(q1 p1"\n', "malformed"),
        ('experiment = "conservation"\n[system]\nhamiltonian = "tr(q7)"\n', "unknown label"),
        ('experiment = "conservation"\n[system]\nhamiltonian = "tr(q1 k)"\n', "undefined constant"),
        ('experiment = "conservation"\n[params]\ndt = "fast"\n', "number"),
        ('experiment = "conservation"\n[params]\nn_traj = 1.5\n', "integer"),
        ('experiment = "conservation"\nseed = -1\n', "unsigned"),
        ('experiment = "collapse_born"\n[collapse]\nmode = "grw"\n', "mode"),
        ('experiment = "ward"\n[ward]\nchoices = [["mat(q1", "q1"]]\n', "malformed W"),
        ('experiment = "conservation"\n[system]\ndim = 2\n[system.constants]\nj = [[1, 2]]\n', "2x2"),
        ("experiment = \n", "TOML"),
    ],
)
def test_rejections(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_constants_and_registry():
    text = """\
experiment = "conservation"
[system]
dim = 2
hamiltonian = "tr(p1 p1) + tr(q1 j)"
[system.constants]
j = [[1, "0.5j"], ["-0.5j", 2]]
"""
    cfg = parse_config(text)
    assert cfg.registry()["j"][0, 1] == 0.5j
    assert cfg.registry()["j"][1, 1] == 2


def test_experiment_list():
    assert {"conservation", "liouville", "ensemble_gaussian", "ward", "hbar", "collapse_born",
            "collapse_lindblad", "degenerate_contrast", "noise_bridge"} <= set(EXPERIMENTS)


CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("name", EXPERIMENTS)
def test_shipped_example_config_parses(name):
    cfg = load_config(CONFIG_DIR / f"{name}.toml")
    assert cfg.experiment == name
