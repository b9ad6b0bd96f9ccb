import numpy as np
import pytest

from tracedyn.dynamics import (
    ConfigurationError,
    IntegrationError,
    canonical_generator_flow,
    charge_Ctilde,
    charge_N,
    charges,
    ctilde_checks,
    integrate,
    liouville_divergence,
    random_hamiltonian,
)
from tracedyn.phase_space import (
    apply_unitary,
    boson,
    check_constraints,
    fermion,
    fermionic_algebra,
    make_state,
    random_bosonic_state,
    random_mixed_state,
    random_unitary,
)
from tracedyn.trace_calculus import TracePolynomial

tp = TracePolynomial.parse
HARMONIC = tp("tr(p1 p1) + tr(q1 q1)")


def test_harmonic_closed_form():
    # qdot = 2p, pdot = -2q
    s0 = random_bosonic_state(["1"], 2, np.random.default_rng(0))
    traj = integrate(HARMONIC, s0, 1.0, 1e-3, record_every=1000)
    q1 = traj.states[-1].q("1")
    exact = s0.q("1") * np.cos(2.0) + s0.p("1") * np.sin(2.0)
    np.testing.assert_allclose(q1, exact, atol=1e-11)
    assert traj.states[-1].time == pytest.approx(1.0)


def test_leapfrog_close_to_rk4_and_rejects_coupled_H():
    s0 = random_bosonic_state(["1"], 2, np.random.default_rng(1))
    a = integrate(HARMONIC, s0, 0.5, 1e-3, "leapfrog", 500).states[-1]
    b = integrate(HARMONIC, s0, 0.5, 1e-3, "rk4", 500).states[-1]
    assert a.allclose(b, atol=1e-5)
    with pytest.raises(ConfigurationError):
        integrate(tp("tr(q1 p1 q1 p1)"), s0, 0.1, 1e-3, "leapfrog")
    with pytest.raises(ConfigurationError):
        integrate(HARMONIC, s0, 0.1, -1.0)


def test_fermion_number_phase_rotation():
    """H = w N = i w Tr(q p) rotates q -> exp(-i w t) q exactly."""
    alg = fermionic_algebra(1)
    rng = np.random.default_rng(2)
    q = np.zeros((alg.nb, 2, 2), complex)
    q[1] = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    s0 = make_state((fermion("1"),), {"1": q}, algebra=alg)
    w = 0.7
    H = tp(f"{w}j*tr(q1 p1)")
    traj = integrate(H, s0, 2.0, 1e-3, record_every=2000)
    np.testing.assert_allclose(traj.states[-1].q("1"), np.exp(-1j * w * 2.0) * q, atol=1e-10)
    assert check_constraints(traj.states[-1], 1e-10).passed


def test_charge_values():
    q = np.array([[1, 2], [2, -1]], complex)
    p = np.array([[0, 1j], [-1j, 3]], complex)
    s = make_state((boson("1"),), {"1": (q, p)})
    np.testing.assert_allclose(charge_Ctilde(s), q @ p - p @ q)
    assert charge_N(s) == 0
    tr, anti = ctilde_checks(charge_Ctilde(s), s)
    assert tr < 1e-14 and anti < 1e-14


def test_charges_unitary_invariant():
    rng = np.random.default_rng(3)
    s = random_bosonic_state(["1", "2"], 3, rng)
    H = random_hamiltonian(s.roster, rng)
    U = random_unitary(3, rng)
    a, b = charges(H, s), charges(H, apply_unitary(s, U))
    assert a.H_trace == pytest.approx(b.H_trace)
    np.testing.assert_allclose(U.conj().T @ a.C_tilde @ U, b.C_tilde, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_mixed_roster_conservation(seed):
    rng = np.random.default_rng(seed)
    alg = fermionic_algebra(2)
    s0 = random_mixed_state(["1"], ["2"], 2, alg, rng, 0.7, 0.5)
    H = random_hamiltonian(s0.roster, rng)
    traj = integrate(H, s0, 1.0, 1e-3, record_every=100, keep_states=False)
    d = traj.drift()
    assert max(d.values()) < 1e-8
    for c in traj.charges:
        tr, anti = ctilde_checks(c.C_tilde, s0)
        assert tr < 1e-10 and anti < 1e-10
        assert c.constraint_violation < 1e-10


@pytest.mark.slow
def test_mixed_roster_conservation_at_eight_generators():
    rng = np.random.default_rng(8)
    alg = fermionic_algebra(4)
    assert alg.G == 8
    s0 = random_mixed_state(["1"], ["2"], 2, alg, rng, 0.7, 0.5)
    H = random_hamiltonian(s0.roster, rng)
    traj = integrate(H, s0, 0.05, 1e-3, record_every=10, keep_states=False)
    assert max(traj.drift().values()) < 1e-10
    for c in traj.charges:
        tr, anti = ctilde_checks(c.C_tilde, s0)
        assert tr < 1e-10 and anti < 1e-10


def test_liouville_divergence_vanishes():
    rng = np.random.default_rng(4)
    s = random_bosonic_state(["1", "2"], 2, rng)
    H = random_hamiltonian(s.roster, rng)
    div, scale = liouville_divergence(H, s)
    assert scale > 0
    assert abs(div) < 1e-6 * scale


def test_generator_flow_translation():
    s = random_bosonic_state(["1"], 2, np.random.default_rng(5))
    t = canonical_generator_flow(tp("tr(p1)"), s, 0.25)
    np.testing.assert_allclose(t.q("1"), s.q("1") + 0.25 * np.eye(2))
    np.testing.assert_allclose(t.p("1"), s.p("1"))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blowup_reports_last_good_state():
    s = random_bosonic_state(["1"], 2, np.random.default_rng(6), scale=3.0)
    H = tp("tr(p1 p1) - 1e6*tr(q1 q1 q1 q1)")
    with pytest.raises(IntegrationError) as err:
        integrate(H, s, 10.0, 0.1)
    assert err.value.last_good is not None
    assert np.all(np.isfinite(err.value.last_good.stack()))


def test_trajectory_csv_header():
    s = random_bosonic_state(["1"], 2, np.random.default_rng(7))
    text = integrate(HARMONIC, s, 0.01, 1e-3, record_every=5).to_csv()
    assert text.splitlines()[0] == "time,H_trace,abs_N_trace,Ctilde_fro_norm,constraint_violation"
    assert len(text.splitlines()) == 4
