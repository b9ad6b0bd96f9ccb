import numpy as np
import pytest

from tracedyn.ensemble import (
    EnsembleError,
    EnsembleParams,
    berezin_average,
    compare_averages,
    effective_hbar,
    emergent_commutator_residual,
    ensemble_average,
    fix_samples,
    gaussian_ctilde_mean,
    integrated_time,
    log_weight,
    mcmc_sample,
    mean_stderr,
    unitary_fix,
    ward_terms,
)
from tracedyn.phase_space import boson, i_eff, fermion, make_state, random_bosonic_state, random_unitary
from tracedyn.trace_calculus import Letter, MatrixPolynomial, TracePolynomial

tp = TracePolynomial.parse
mp = MatrixPolynomial.parse
GAUSS1 = tp("tr(p1 p1) + tr(q1 q1)")
GAUSS2 = tp("tr(p1 p1) + tr(q1 q1) + tr(p2 p2) + tr(q2 q2)")
SX = np.array([[0, 1], [1, 0]], complex)
SY = np.array([[0, -1j], [1j, 0]], complex)


@pytest.fixture(scope="module")
def gauss_samples():
    return mcmc_sample(GAUSS1, EnsembleParams(tau=1.0, dim=2), 40_000, burn_in=3000, seed=11)


class TestParams:
    def test_validation(self):
        with pytest.raises(EnsembleError):
            EnsembleParams(tau=-1, dim=2)
        with pytest.raises(EnsembleError):
            EnsembleParams(tau=0, dim=2)
        with pytest.raises(EnsembleError, match="even"):
            EnsembleParams(tau=1, dim=3, lambda_hat=1)
        assert EnsembleParams(tau=0, dim=2, lambda_hat=1).labels == ["1"]

    def test_log_weight_values(self):
        # q = sx, p = sy: C~ = [sx, sy] = 2 i sz = 2 i_eff, Tr(i_eff C~) = -4, H = 4
        s = make_state((boson("1"),), {"1": (SX, SY)})
        assert log_weight(s, GAUSS1, EnsembleParams(tau=0.25, dim=2)) == pytest.approx(-1.0)
        assert log_weight(s, GAUSS1, EnsembleParams(tau=0.25, dim=2, lambda_hat=1.0)) == pytest.approx(3.0)

    def test_sampler_rejects_fermions(self):
        with pytest.raises(EnsembleError):
            mcmc_sample(GAUSS1, EnsembleParams(tau=1, dim=2, roster=(fermion("1"),)), 10)


class TestStatistics:
    def test_integrated_time_ar1(self):
        # AR(1) with coefficient r has tau = (1 + r) / (1 - r) = 3 for r = 0.5
        rng = np.random.default_rng(0)
        n, r = 200_000, 0.5
        e = rng.standard_normal((n, 2))
        x = np.empty_like(e)
        x[0] = e[0] / np.sqrt(1 - r * r)
        for t in range(1, n):
            x[t] = r * x[t - 1] + e[t]
        assert integrated_time(x[:, :, None])[0] == pytest.approx(3.0, rel=0.08)

    def test_iid_stderr(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((50_000, 4)) * 2.0
        m, se = mean_stderr(x)
        assert se == pytest.approx(2.0 / np.sqrt(200_000), rel=0.05)
        assert abs(m) < 4 * se

    def test_constant_series(self):
        m, se = mean_stderr(np.full((100, 2), 3.0))
        assert m == 3.0 and se == 0.0


class TestSampling:
    def test_equipartition(self, gauss_samples):
        # <Tr q^2> = N^2 / (2 tau)
        m, se = ensemble_average(tp("tr(q1 q1)"), gauss_samples)
        assert abs(m - 2.0) < 3 * se
        assert 0.2 < gauss_samples.acceptance.mean() < 0.45

    def test_reproducible(self):
        a = mcmc_sample(GAUSS1, EnsembleParams(1.0, 2), 200, burn_in=100, seed=5)
        b = mcmc_sample(GAUSS1, EnsembleParams(1.0, 2), 200, burn_in=100, seed=5)
        np.testing.assert_array_equal(a.mats, b.mats)

    def test_hbar_matches_gaussian_closed_form(self):
        # Gaussian mean: hbar = n_b (N / 2) lambda / (tau^2 - lambda^2)
        params = EnsembleParams(1.0, 2, ("1", "2"), lambda_hat=0.5)
        np.testing.assert_allclose(gaussian_ctilde_mean(params), np.diag([4j / 3, -4j / 3]), atol=1e-12)
        S = mcmc_sample(GAUSS2, params, 40_000, burn_in=3000, seed=2)
        est = effective_hbar(S)
        assert abs(est.hbar - 4 / 3) < 3 * est.stderr
        assert est.anisotropy < 1e-12

    @pytest.mark.parametrize("tau,dim,n_b", [(1.0, 4, 1), (2.0, 2, 1), (1.5, 6, 2)])
    def test_gaussian_mean_closed_form(self, tau, dim, n_b):
        lam = 0.3
        params = EnsembleParams(tau, dim, tuple(str(k) for k in range(n_b)), lambda_hat=lam)
        hbar = n_b * (dim / 2) * lam / (tau**2 - lam**2)
        np.testing.assert_allclose(gaussian_ctilde_mean(params), hbar * i_eff(dim), atol=1e-12)


class TestUnitaryFix:
    def test_frame(self):
        rng = np.random.default_rng(3)
        s = random_bosonic_state(["1", "2"], 3, rng)
        f, info = unitary_fix(s, return_info=True)
        q = f.q("1")
        np.testing.assert_allclose(q, np.diag(np.diag(q)), atol=1e-12)
        assert np.all(np.diff(np.diag(q).real) > 0)
        assert not info.degenerate
        assert np.trace(f.q("2") @ f.p("1")) == pytest.approx(np.trace(s.q("2") @ s.p("1")))

    def test_gauge_orbit_lands_on_same_point(self):
        rng = np.random.default_rng(4)
        s = random_bosonic_state(["1"], 3, rng)
        from tracedyn.phase_space import apply_unitary

        a = unitary_fix(s)
        b = unitary_fix(apply_unitary(s, random_unitary(3, rng)))
        # same point up to the residual diagonal phases
        np.testing.assert_allclose(a.q("1"), b.q("1"), atol=1e-10)
        np.testing.assert_allclose(np.abs(a.p("1")), np.abs(b.p("1")), atol=1e-10)

    def test_degenerate_tie_break(self):
        rng = np.random.default_rng(5)
        p = random_bosonic_state(["1"], 3, rng).p("1")
        s = make_state((boson("1"),), {"1": (np.diag([1.0, 1.0, 2.0]).astype(complex), p)})
        f, info = unitary_fix(s, return_info=True)
        assert info.degenerate
        block = f.p("1")[:2, :2]
        np.testing.assert_allclose(block, np.diag(np.diag(block)), atol=1e-12)

    def test_batched_matches_single(self, gauss_samples):
        fixed = fix_samples(gauss_samples)
        single = unitary_fix(gauss_samples.state(7, 1))
        assert fixed.state(7, 1).allclose(single, atol=1e-10)


LAMBDA_PARAMS = EnsembleParams(1.0, 2, ("1", "2"), lambda_hat=0.5)


@pytest.fixture(scope="module")
def lambda_samples():
    return mcmc_sample(GAUSS2, LAMBDA_PARAMS, 40_000, burn_in=3000, seed=9)


class TestWard:
    @pytest.mark.parametrize(
        "W,x",
        [
            (mp("mat(q1)"), Letter("q", "1")),
            (mp("mat(q1 p2)"), Letter("p", "2")),
            (tp("tr(q1 q1)"), Letter("q", "1")),
            (mp("mat(p1)"), Letter("q", "1")),
        ],
    )
    def test_identity_holds(self, lambda_samples, W, x):
        rep = ward_terms(W, x, GAUSS2, LAMBDA_PARAMS, lambda_samples)
        assert rep.passed, rep.p_value
        assert rep.to_csv().startswith("term,component")

    def test_terms_are_individually_nonzero(self, lambda_samples):
        rep = ward_terms(mp("mat(q1)"), Letter("q", "1"), GAUSS2, LAMBDA_PARAMS, lambda_samples)
        # the tau H and W-variation terms are each far from zero and cancel
        for k in ("t2", "t5"):
            se = rep.stderr[k].real
            z = np.abs(rep.terms[k].real) / np.where(se > 0, se, np.inf)
            assert z.max() > 10, k

    def test_wrong_weight_fails(self, lambda_samples):
        wrong = EnsembleParams(1.5, 2, ("1", "2"), lambda_hat=0.5)
        rep = ward_terms(mp("mat(q1)"), Letter("q", "1"), GAUSS2, wrong, lambda_samples)
        assert not rep.passed

    def test_reflection_symmetric_case_is_trivial(self, gauss_samples):
        # with lambda_hat = 0, p -> -p flips A while keeping the weight,
        # so every term averages to zero on its own
        rep = ward_terms(mp("mat(q1)"), Letter("q", "1"), GAUSS1, EnsembleParams(1.0, 2), gauss_samples)
        assert rep.passed
        assert np.all(np.abs(rep.terms["t2"].real) < 4 * rep.stderr["t2"].real)


def test_commutator_residual_for_coordinate():
    # W = p: i_eff [p_eff, q_eff] vanishes on average while d Tr W / d p = 1
    S = mcmc_sample(GAUSS2, LAMBDA_PARAMS, 8_000, burn_in=2000, seed=4)
    r = emergent_commutator_residual(mp("mat(q1)"), Letter("q", "1"), S, 4 / 3)
    np.testing.assert_allclose(r.commutator, 0, atol=1e-12)
    np.testing.assert_allclose(r.derivative, 0, atol=1e-12)


class TestBerezin:
    def test_single_entry(self):
        # S = i w theta0 theta1: Z = i w, <N> = -1/w
        w = 0.5
        params = EnsembleParams(1.0, 1, (fermion("1"),))
        res = berezin_average({"N": "N"}, tp(f"{w}j*tr(q1 p1)"), params)
        assert res.n_generators == 2
        assert res.partition == pytest.approx(1j * w)
        assert res.values["N"] == pytest.approx(-1 / w)

    def test_gaussian_n2(self):
        # four independent entry pairs: Z = w^4, <N> = -N^2 / w
        w = 0.5
        params = EnsembleParams(1.0, 2, (fermion("1"),))
        res = berezin_average({"N": "N", "qp": tp("tr(q1 p1)")}, tp(f"{w}j*tr(q1 p1)"), params)
        assert res.partition == pytest.approx(w**4)
        assert res.values["N"] == pytest.approx(-4 / w)
        assert res.values["qp"] == pytest.approx(res.values["N"] / 1j)

    def test_limits(self):
        with pytest.raises(EnsembleError):
            berezin_average({}, GAUSS1, EnsembleParams(1.0, 3, (fermion("1"),)))
        with pytest.raises(EnsembleError):
            berezin_average({}, GAUSS1, EnsembleParams(1.0, 2))


def test_compare_same_distribution(gauss_samples):
    other = mcmc_sample(GAUSS1, EnsembleParams(1.0, 2), 40_000, burn_in=3000, seed=12)
    comps = compare_averages({"q2": tp("tr(q1 q1)"), "qpqp": tp("tr(q1 p1 q1 p1)")}, gauss_samples, other)
    assert all(c.z < 4 for c in comps)
