import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tracedyn.grassmann import CONJ_PRESERVE
from tracedyn.phase_space import (
    ConstraintError,
    NotUnitaryError,
    VariableSpec,
    adjoint,
    apply_unitary,
    boson,
    check_constraints,
    eff_project,
    fermion,
    fermionic_algebra,
    hermitian_basis,
    hermitian_coords,
    hermitian_from_coords,
    i_eff,
    make_state,
    random_bosonic_state,
    random_eff_unitary,
    random_hermitian,
    random_mixed_state,
    random_unitary,
)


def test_i_eff():
    np.testing.assert_array_equal(i_eff(4), np.diag([1j, 1j, -1j, -1j]))
    np.testing.assert_allclose(i_eff(4) @ i_eff(4), -np.eye(4))
    with pytest.raises(ValueError, match="even"):
        i_eff(3)


def test_eff_project():
    M = np.arange(16).reshape(4, 4).astype(complex)
    E = eff_project(M)
    # keeps the two diagonal blocks, kills the off-diagonal ones
    expected = np.zeros_like(M)
    expected[:2, :2], expected[2:, 2:] = M[:2, :2], M[2:, 2:]
    np.testing.assert_allclose(E, expected)
    np.testing.assert_allclose(eff_project(E), E)


@given(st.integers(min_value=1, max_value=5))
def test_hermitian_basis_orthonormal(dim):
    B = hermitian_basis(dim)
    assert B.shape == (dim * dim, dim, dim)
    gram = np.einsum("kab,lba->kl", B, B)
    np.testing.assert_allclose(gram, np.eye(dim * dim), atol=1e-14)
    np.testing.assert_allclose(B, np.conj(np.swapaxes(B, 1, 2)))


def test_hermitian_coords_round_trip():
    rng = np.random.default_rng(0)
    B = hermitian_basis(3)
    M = random_hermitian(3, rng)
    x = hermitian_coords(M, B)
    np.testing.assert_allclose(hermitian_from_coords(x, B), M, atol=1e-14)
    # Tr M^2 = sum x^2
    assert np.sum(x**2) == pytest.approx(np.trace(M @ M).real)


def test_bosonic_state_constraints():
    s = random_bosonic_state(["1", "2"], 3, np.random.default_rng(1))
    assert check_constraints(s).passed
    with pytest.raises(ConstraintError):
        make_state((boson("1"),), {"1": (np.eye(2), np.array([[0, 1j], [0, 0]]))})


def test_fermion_momentum_from_rule():
    alg = fermionic_algebra(1)
    q = np.zeros((alg.nb, 2, 2), complex)
    q[1] = [[1, 2j], [0, 1]]
    s = make_state((fermion("1"),), {"1": q}, algebra=alg)
    np.testing.assert_allclose(s.p("1"), adjoint(q, alg))
    assert check_constraints(s).passed


def test_mixed_state_and_roster_validation():
    alg = fermionic_algebra(2)
    s = random_mixed_state(["b"], ["f"], 2, alg, np.random.default_rng(2))
    assert check_constraints(s).passed
    assert alg.order == CONJ_PRESERVE
    with pytest.raises(ValueError):
        VariableSpec("x", parity=0)
    with pytest.raises(ValueError):
        VariableSpec("x", adjoint_rule="generalized", parity=-1)


def test_apply_unitary():
    rng = np.random.default_rng(3)
    s = random_bosonic_state(["1"], 3, rng)
    U = random_unitary(3, rng)
    t = apply_unitary(s, U)
    np.testing.assert_allclose(t.q("1"), U.conj().T @ s.q("1") @ U)
    assert np.trace(t.q("1") @ t.p("1")) == pytest.approx(np.trace(s.q("1") @ s.p("1")))
    with pytest.raises(NotUnitaryError):
        apply_unitary(s, 2 * np.eye(3))


def test_eff_unitary_commutes_with_i_eff():
    U = random_eff_unitary(4, np.random.default_rng(4))
    np.testing.assert_allclose(U @ i_eff(4), i_eff(4) @ U, atol=1e-14)
