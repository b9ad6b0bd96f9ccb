import json

import numpy as np
import pytest

from tracedyn import __version__
from tracedyn.cli import main
from tracedyn.config import parse_config
from tracedyn.experiments import (
    OutputExistsError,
    build_manifest,
    derivative_cases,
    grassmann_axiom_residuals,
    run_experiment,
    write_results,
)

HARMONIC = """\
experiment = "conservation"
seed = 1
[system]
dim = 2
bosons = ["1"]
hamiltonian = "tr(p1 p1) + tr(q1 q1)"
[params]
t_final = 0.5
record_every = 50
"""

BORN_NO_NOISE = """\
experiment = "collapse_born"
[params]
gamma = 0.0
n_traj = 20
t_final = 0.5
dt = 1e-2
"""


@pytest.fixture
def cfg_file(tmp_path):
    def write(text, name="cfg.toml"):
        p = tmp_path / name
        p.write_text(text)
        return str(p)

    return write


def test_harmonic_conservation_run(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", cfg_file(HARMONIC), "--out", str(out)]) == 0
    drift = (out / "drift.csv").read_text().splitlines()
    assert drift[0].startswith("hamiltonian,drift_H,drift_N,drift_Ctilde")
    assert drift[1].endswith(",true")
    man = json.loads((out / "manifest.json").read_text())
    assert man["version"] == __version__
    assert man["seed"] == 1
    assert man["config"]["hamiltonian"] == "tr(p1 p1) + tr(q1 q1)"
    assert set(man["artifacts"]) == {"drift.csv", "charges_0.csv", "hamiltonian_0.txt"}
    assert "PASS" in capsys.readouterr().out


def test_designed_failure_exit_1(cfg_file, tmp_path):
    assert main(["run", "--config", cfg_file(BORN_NO_NOISE), "--out", str(tmp_path / "b")]) == 1
    man = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert man["passed"] is False
    assert man["summary"]["resolved_fraction"] == 0


def test_config_error_exit_2(cfg_file, tmp_path, capsys):
    bad = cfg_file(HARMONIC.replace("t_final", "t_fnal"))
    assert main(["run", "--config", bad, "--out", str(tmp_path / "x")]) == 2
    assert "t_fnal" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path / "x")]) == 2
    assert main(["run", "--config", bad]) == 2
    assert main(["bogus"]) == 2


def test_rerun_requires_force_and_is_byte_identical(cfg_file, tmp_path):
    cfg = cfg_file(HARMONIC)
    out = tmp_path / "r"
    assert main(["run", "--config", cfg, "--out", str(out)]) == 0
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert main(["run", "--config", cfg, "--out", str(out)]) == 2
    assert main(["run", "--config", cfg, "--out", str(out), "--force"]) == 0
    second = {p.name: p.read_bytes() for p in out.iterdir()}
    assert first == second


def test_seed_override_changes_manifest(cfg_file, tmp_path):
    cfg = cfg_file(HARMONIC.replace('hamiltonian = "tr(p1 p1) + tr(q1 q1)"\n', ""))
    main(["run", "--config", cfg, "--out", str(tmp_path / "a"), "--seed", "5"])
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 5 and man["config"]["seed"] == 5


def test_list_and_validate(cfg_file, capsys):
    assert main(["list"]) == 0
    assert "collapse_lindblad" in capsys.readouterr().out
    assert main(["validate", "--config", cfg_file(HARMONIC)]) == 0
    assert json.loads(capsys.readouterr().out)["experiment"] == "conservation"


def test_write_results_manifest_only(tmp_path):
    cfg = parse_config(HARMONIC)
    man = build_manifest(cfg, None)
    paths = write_results({}, tmp_path / "empty", man)
    assert [p.name for p in paths] == ["manifest.json"]
    with pytest.raises(OutputExistsError):
        write_results({}, tmp_path / "empty", man)
    # no temp files left behind
    assert [p.name for p in (tmp_path / "empty").iterdir()] == ["manifest.json"]


def test_write_results_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        write_results({"a.csv": "1\n"}, blocker / "sub", {})


def test_manifest_hash_stable():
    a = build_manifest(parse_config(HARMONIC), None)
    b = build_manifest(parse_config(HARMONIC), None)
    assert a == b and len(a["config_hash"]) == 64


def test_ensemble_gaussian_rejects_hamiltonian():
    from tracedyn.config import ConfigError

    cfg = parse_config('experiment = "ensemble_gaussian"\n[system]\nhamiltonian = "tr(q1 q1)"\n')
    with pytest.raises(ConfigError):
        run_experiment(cfg)


def test_threads_do_not_change_results(cfg_file, tmp_path, monkeypatch):
    text = HARMONIC.replace('hamiltonian = "tr(p1 p1) + tr(q1 q1)"\n', "") + "n_hamiltonians = 3\n"
    cfg = parse_config(text)
    monkeypatch.setenv("TRACEDYN_THREADS", "1")
    a = run_experiment(cfg).artifacts
    monkeypatch.setenv("TRACEDYN_THREADS", "3")
    b = run_experiment(cfg).artifacts
    assert a == b


def test_algebra_helpers():
    rng = np.random.default_rng(0)
    res = grassmann_axiom_residuals(rng, G=4, n_cases=5)
    assert max(res.values()) < 1e-12
    cases = derivative_cases(rng, n_cases=5)
    assert max(c["error"] for c in cases) < 1e-6
