import hashlib

import numpy as np
import pytest

from tracedyn.collapse import (
    CSL,
    ENERGY_DRIVEN,
    CollapseConfig,
    CollapseError,
    StateVector,
    born_statistics,
    config_hash,
    contour_projector,
    ctilde_noise_bridge,
    degenerate_model,
    degenerate_no_collapse_experiment,
    ground_state_projector,
    joint_eigenspaces,
    lindblad_evolve,
    ljung_box,
    mass_density_channels,
    norm_drift_diagnostic,
    offdiagonal_decay,
    run_trajectories,
    sde_step,
)
from tracedyn.phase_space import i_eff

H2 = np.diag([0.0, 1.0]).astype(complex)
PSI0 = np.array([np.sqrt(0.3), np.sqrt(0.7)], complex)


def energy_cfg(gamma=1.0, **kw):
    return CollapseConfig(ENERGY_DRIVEN, H2, gamma, **kw)


class TestConfig:
    def test_validation(self):
        with pytest.raises(CollapseError):
            CollapseConfig("grw", H2, 1.0)
        with pytest.raises(CollapseError):
            CollapseConfig(ENERGY_DRIVEN, np.array([[0, 1], [0, 0]]), 1.0)
        with pytest.raises(CollapseError):
            CollapseConfig(ENERGY_DRIVEN, H2, 1.0, channels=(H2,))
        with pytest.raises(CollapseError):
            CollapseConfig(CSL, H2, 1.0)
        sx = np.array([[0, 1], [1, 0]], complex)
        with pytest.raises(CollapseError, match="commute"):
            CollapseConfig(CSL, H2, 1.0, channels=(H2, sx))
        with pytest.raises(CollapseError):
            energy_cfg(-1.0)

    def test_hash(self):
        assert config_hash({"b": 1, "a": [1, 2]}) == hashlib.sha256(b'{"a":[1,2],"b":1}').hexdigest()
        assert energy_cfg().hash() == energy_cfg().hash()
        assert energy_cfg().hash() != energy_cfg(2.0).hash()

    def test_state_vector(self):
        s = StateVector([3, 4])
        assert s.norm == 5
        assert s.normalized().norm == pytest.approx(1)
        with pytest.raises(CollapseError):
            StateVector([1], hbar=0)


class TestSpectral:
    def test_joint_eigenspaces(self):
        H, (PL, PR), _ = degenerate_model()
        projs = joint_eigenspaces(mass_density_channels((PL, PR), (1.0, 1.0)))
        assert len(projs) == 2
        assert sorted(int(round(np.trace(P).real)) for P in projs) == [2, 2]
        # H alone has two doubly degenerate levels
        assert len(joint_eigenspaces([H])) == 2

    def test_ground_state_projector(self):
        H = np.array([[1.0, 0.5], [0.5, -1.0]])
        P = ground_state_projector(H)
        e, V = np.linalg.eigh(H)
        np.testing.assert_allclose(P, np.outer(V[:, 0], V[:, 0].conj()), atol=1e-12)
        np.testing.assert_allclose(contour_projector(H, e[0], 0.5 * (e[1] - e[0])), P, atol=1e-10)
        with pytest.raises(CollapseError, match="degenerate"):
            ground_state_projector(np.eye(2))


class TestStepping:
    def test_completed_step_is_normalized(self):
        rng = np.random.default_rng(0)
        psi = PSI0.copy()
        for _ in range(100):
            psi = sde_step(psi, energy_cfg(), rng.normal(0, np.sqrt(1e-2), 1), 1e-2)
        assert np.linalg.norm(psi) == pytest.approx(1.0, abs=1e-14)

    def test_zero_noise_is_schrodinger_step(self):
        cfg = energy_cfg(0.0)
        out = sde_step(StateVector(PSI0), cfg, np.zeros(1), 1e-3)
        expected = PSI0 - 1j * 1e-3 * (H2 @ PSI0)
        np.testing.assert_allclose(out.amplitudes, expected / np.linalg.norm(expected))
        assert out.time == pytest.approx(1e-3)

    def test_linear_step_value(self):
        # raw linear step: psi - i H psi dt - A psi dW, no renormalization
        out = sde_step(PSI0, energy_cfg(), np.array([0.1]), 1e-3, completed=False)
        np.testing.assert_allclose(out, PSI0 - 1j * 1e-3 * H2 @ PSI0 - 0.1 * H2 @ PSI0)

    def test_batch_equals_single(self):
        rng = np.random.default_rng(1)
        batch = np.array([PSI0, PSI0[::-1]])
        dW = rng.normal(size=(2, 1)) * 0.03
        out = sde_step(batch, energy_cfg(), dW, 1e-3)
        for k in range(2):
            np.testing.assert_allclose(out[k], sde_step(batch[k], energy_cfg(), dW[k], 1e-3))

    def test_increment_count_checked(self):
        with pytest.raises(CollapseError):
            sde_step(PSI0, energy_cfg(), np.zeros(2), 1e-3)


class TestTrajectories:
    def test_deterministic_and_split_invariant(self):
        a = run_trajectories(PSI0, energy_cfg(), 0.5, 1e-2, 10, seed=3)
        b = run_trajectories(PSI0, energy_cfg(), 0.5, 1e-2, 10, seed=3)
        c = run_trajectories(PSI0, energy_cfg(), 0.5, 1e-2, 4, seed=3)
        np.testing.assert_array_equal(a.final_states, b.final_states)
        np.testing.assert_array_equal(a.final_states[:4], c.final_states)
        assert a.to_csv() == b.to_csv()
        assert a.to_csv().splitlines()[0] == "trajectory_id,outcome,resolve_time,final_norm"

    def test_requires_normalized_input(self):
        with pytest.raises(CollapseError):
            run_trajectories(2 * PSI0, energy_cfg(), 1.0, 1e-2, 2, 0)

    def test_born_rule_small(self):
        rec = run_trajectories(PSI0, energy_cfg(), 15.0, 5e-3, 1500, seed=4)
        rep = born_statistics(rec, PSI0)
        assert rep.resolved_fraction >= 0.99
        assert rep.passed, rep.to_dict()
        np.testing.assert_allclose(rep.probabilities, [0.3, 0.7])
        lo, hi = rep.intervals[0]
        assert lo < rep.frequencies[0] < hi

    def test_no_collapse_without_noise(self):
        rec = run_trajectories(PSI0, energy_cfg(0.0), 1.0, 1e-2, 20, seed=0)
        rep = born_statistics(rec, PSI0)
        assert rep.resolved_fraction == 0
        assert not rep.passed

    def test_linear_norm_growth(self):
        # for diagonal A the linear equation gives E|psi_i|^2 = |c_i|^2 exp(gamma E_i^2 t)
        t = 1.0
        rec = run_trajectories(PSI0, energy_cfg(), t, 1e-3, 4000, seed=5, completed=False, n_checkpoints=1)
        n2 = rec.final_norm**2
        expected = 0.3 + 0.7 * np.exp(t)
        assert abs(n2.mean() - expected) < 4 * n2.std(ddof=1) / np.sqrt(len(n2))


class TestLindblad:
    def test_closed_form_matches_expm(self):
        rho0 = np.outer(PSI0, PSI0.conj())
        cfg = CollapseConfig(ENERGY_DRIVEN, np.diag([0.2, 1.5]).astype(complex), 0.7, hbar=1.3)
        ts = np.linspace(0, 3, 7)
        rho = lindblad_evolve(rho0, cfg, ts)
        np.testing.assert_allclose(rho[:, 0, 1], offdiagonal_decay(rho0[0, 1], 0.2, 1.5, 0.7, ts, 1.3), atol=1e-12)
        np.testing.assert_allclose(rho[:, 0, 0], 0.3, atol=1e-12)

    def test_known_number(self):
        # rho01(2) = sqrt(.21) exp(2i - 1)
        val = offdiagonal_decay(np.sqrt(0.21), 0.0, 1.0, 1.0, 2.0)
        assert val == pytest.approx(np.sqrt(0.21) * np.exp(2j - 1.0))

    def test_csl_channels(self):
        P0 = np.diag([1.0, 0.0]).astype(complex)
        P1 = np.diag([0.0, 1.0]).astype(complex)
        cfg = CollapseConfig(CSL, np.zeros((2, 2)), 0.4, channels=mass_density_channels((P0, P1), (1.0, 3.0)))
        rho0 = np.full((2, 2), 0.5, complex)
        # two channels: decay rate gamma/2 * ((1-0)^2 + (0-3)^2)
        r = lindblad_evolve(rho0, cfg, 1.5)
        assert r[0, 1] == pytest.approx(0.5 * np.exp(-0.2 * 10 * 1.5))

    def test_input_validation(self):
        with pytest.raises(CollapseError):
            lindblad_evolve(np.eye(2), energy_cfg(), 1.0)

    def test_trajectory_average(self):
        rec = run_trajectories(PSI0, energy_cfg(), 1.0, 1e-3, 800, seed=6, n_checkpoints=2)
        rho0 = np.outer(PSI0, PSI0.conj())
        mean, se = rec.mean_density(-1)
        exact = lindblad_evolve(rho0, energy_cfg(), 1.0)
        assert abs(mean[0, 1].real - exact[0, 1].real) < 4 * se[0, 1].real
        assert abs(mean[0, 1].imag - exact[0, 1].imag) < 4 * se[0, 1].imag


def test_degenerate_contrast_small():
    rep = degenerate_no_collapse_experiment(t_final=10.0, dt=4e-3, n_traj=150, seed=1)
    # energy-driven noise cannot separate locations with identical spectra
    assert rep.energy_max_abs_drift < 1e-10
    assert rep.csl_resolved_fraction >= 0.99
    assert rep.passed


def test_norm_drift_diagnostic():
    # relative rate of the linear equation starts at gamma <A^2> = 0.7
    rep = norm_drift_diagnostic(PSI0, energy_cfg(), 0.5, 1e-3, 400, seed=2)
    assert 0.2 < rep.linear_rate < 1.2
    assert abs(rep.completed_rate) < 0.01
    assert rep.passed and rep.ratio > 10


class TestNoiseBridge:
    def test_constant_series(self):
        C = 1.5 * i_eff(2)
        b = ctilde_noise_bridge(np.repeat(C[None], 50, axis=0))
        assert b.constant and b.white
        assert b.hbar == pytest.approx(1.5)
        np.testing.assert_allclose(b.K, 0, atol=1e-15)

    def test_split(self):
        # C~ = i_eff hbar (1 + K) - i_eff hbar N  =>  -i_eff C~ / hbar = (1 + K) + N
        rng = np.random.default_rng(0)
        hbar, T = 2.0, 300
        K = rng.normal(size=T) * 0.1
        Nm = np.zeros((T, 2, 2), complex)
        Nm[:, 0, 1] = rng.normal(size=T)
        Nm[:, 1, 0] = Nm[:, 0, 1]
        X = (1 + K)[:, None, None] * np.eye(2) + Nm
        C = i_eff(2) @ X * hbar  # -i_eff (i_eff X hbar) / hbar = X
        b = ctilde_noise_bridge(C, hbar=hbar)
        np.testing.assert_allclose(b.K.real, K, atol=1e-12)
        np.testing.assert_allclose(b.Nmat, Nm, atol=1e-12)
        assert b.ljung_box_p > 0.01

    def test_ljung_box_detects_correlation(self):
        rng = np.random.default_rng(1)
        x = np.cumsum(rng.normal(size=500))
        assert ljung_box(x, 10) < 1e-6
        assert ljung_box(rng.normal(size=500), 10) > 1e-3
