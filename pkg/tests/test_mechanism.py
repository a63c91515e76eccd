import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from superexit.mechanism import (BranchingMechanism, Empty, Stable,
                                 TemperedStable, AtomList, binary,
                                 stable_cbeta, from_spec)


def stable_density(beta, c=1.0):
    return lambda r: c * r ** (-2.0 - beta)


def _expm1_remainder(x):
    """e^{-x} - 1 + x without cancellation for small x."""
    if x < 1e-3:
        return x * x * (0.5 - x / 6.0 + x * x / 24.0)
    return math.expm1(-x) + x


def quad_psi(levy_density, lam):
    f = lambda r: _expm1_remainder(lam * r) * levy_density(r)
    # r = t^4 tames the endpoint singularity at 0
    g = lambda t: f(t ** 4) * 4.0 * t ** 3
    lo, _ = integrate.quad(g, 0, 1, limit=200)
    hi, _ = integrate.quad(f, 1, np.inf, limit=200)
    return lo + hi


class TestStableClosedForm:
    @pytest.mark.parametrize("beta", [0.25, 0.5, 0.75])
    def test_psi_at_one_matches_gamma_formula(self, beta):
        mech = BranchingMechanism(0.0, 0.0, Stable(beta, 1.0))
        want = math.gamma(1.0 - beta) / (beta * (1.0 + beta))
        assert mech.psi(1.0) == pytest.approx(want, abs=1e-8)
        assert stable_cbeta(beta) == pytest.approx(want, abs=1e-15)

    @pytest.mark.parametrize("beta", [0.25, 0.5, 0.75])
    def test_psi_matches_independent_quadrature(self, beta):
        mech = BranchingMechanism(0.0, 0.0, Stable(beta, 1.0))
        for lam in (0.3, 1.0, 2.7):
            assert mech.psi(lam) == pytest.approx(
                quad_psi(stable_density(beta), lam), abs=1e-8)

    def test_power_law(self):
        mech = BranchingMechanism(0.0, 0.0, Stable(0.5, 1.0))
        assert mech.psi(4.0) / mech.psi(1.0) == pytest.approx(4.0 ** 1.5,
                                                             rel=1e-9)


class TestDerivatives:
    @pytest.mark.parametrize("mech", [
        binary(),
        BranchingMechanism(0.3, 1.0, TemperedStable(0.5, 1.0, 1.0),
                           lambda0=0.9),
    ], ids=["binary", "tempered"])
    def test_derivatives_match_finite_differences(self, mech):
        for u in (0.3, 1.1):
            h = 1e-3
            fd1 = (mech.psi(u + h) - mech.psi(u - h)) / (2 * h)
            assert mech.psi_deriv(1, u) == pytest.approx(fd1, rel=1e-5)
            for m in range(2, 6):
                fd = (mech.b_coeff(m - 1, u - h)
                      - mech.b_coeff(m - 1, u + h)) / (2 * h) \
                    if m > 2 else \
                    (mech.psi(u + h) - 2 * mech.psi(u)
                     + mech.psi(u - h)) / h ** 2
                assert mech.b_coeff(m, u) == pytest.approx(
                    fd, rel=1e-5, abs=1e-10)

    def test_b_coeff_rejects_low_order(self):
        with pytest.raises(ValueError):
            binary().b_coeff(1, 0.5)

    def test_stable_derivatives_match_power_law(self):
        """Quadrature derivatives vs the exact power-law formula."""
        beta, c = 0.6, 0.8
        mech = BranchingMechanism(0.0, 0.0, Stable(beta, c))
        cb = c * math.gamma(1.0 - beta) / (beta * (1.0 + beta))
        for u in (0.3, 1.1):
            for m in range(2, 6):
                exact = cb
                p = 1.0 + beta
                for k in range(m):
                    exact *= p - k
                exact = abs(exact) * u ** (p - m)
                assert mech.b_coeff(m, u) == pytest.approx(exact, rel=1e-7)

    def test_stable_second_moment_diverges_at_zero(self):
        mech = BranchingMechanism(0.0, 0.0, Stable(0.5, 1.0))
        assert mech.psi_deriv(1, 0.0) == 0.0
        with pytest.raises(ValueError):
            mech.b_coeff(2, 0.0)


@settings(max_examples=30, deadline=None)
@given(u1=st.floats(0.05, 2.0), u2=st.floats(0.05, 2.0),
       m=st.integers(2, 5))
def test_b_coeff_decreasing_in_u(u1, u2, m):
    mech = BranchingMechanism(0.0, 0.5, TemperedStable(0.5, 1.0, 1.0))
    lo, hi = min(u1, u2), max(u1, u2)
    b_lo, b_hi = mech.b_coeff(m, lo), mech.b_coeff(m, hi)
    assert b_lo >= 0 and b_hi >= 0
    assert b_hi <= b_lo + 1e-12


class TestClosedFormShifts:
    """Stable and tempered-stable drift / eta integrals vs quadrature."""

    def test_stable_drift_shift(self):
        beta, c = 0.5, 0.7
        lv = Stable(beta, c)
        for u in (0.2, 1.0, 3.0):
            f = lambda r: (1.0 - math.exp(-u * r)) * r * c * r ** (-2 - beta)
            want = integrate.quad(f, 0, 1.0, limit=200)[0] \
                + integrate.quad(f, 1.0, np.inf, limit=200)[0]
            assert lv.drift_shift(u) == pytest.approx(want, rel=1e-8)

    def test_tempered_drift_shift(self):
        beta, gam, c = 0.5, 1.3, 0.7
        lv = TemperedStable(beta, gam, c)
        for u in (0.2, 1.0):
            f = lambda r: ((1.0 - math.exp(-u * r)) * r
                           * c * r ** (-2 - beta) * math.exp(-gam * r))
            want = integrate.quad(f, 0, np.inf)[0]
            assert lv.drift_shift(u) == pytest.approx(want, rel=1e-9)

    @pytest.mark.parametrize("lv", [Stable(0.5, 0.7),
                                    TemperedStable(0.5, 1.3, 0.7)],
                             ids=["stable", "tempered"])
    def test_eta_integral(self, lv):
        gam = getattr(lv, "gamma", 0.0)
        for u, lam in ((0.3, 0.8), (1.0, 2.0)):
            f = lambda r: (r * math.exp(-u * r)
                           * (1.0 - math.exp(-lam * r))
                           * 0.7 * r ** (-2 - 0.5) * math.exp(-gam * r))
            want = integrate.quad(f, 0, np.inf)[0]
            assert lv.eta_integral(u, lam) == pytest.approx(want, rel=1e-9)

    def test_eta_is_psi_prime_difference(self):
        mech = BranchingMechanism(0.2, 0.6, TemperedStable(0.4, 1.0, 0.5))
        for u, lam in ((0.3, 0.8), (1.2, 0.4)):
            want = mech.psi_deriv(1, u + lam) - mech.psi_deriv(1, u)
            assert mech.eta(u, lam) == pytest.approx(want, rel=1e-8)


class TestReweighting:
    def test_shifted_psi_identity(self):
        mech = BranchingMechanism(0.1, 0.8, TemperedStable(0.6, 1.2, 0.7))
        rw = mech.reweighted(0.9)
        for lam in (0.2, 1.0, 2.5):
            assert rw.psi(lam) == pytest.approx(
                mech.psi(0.9 + lam) - mech.psi(0.9), rel=1e-8)

    def test_composition(self):
        mech = BranchingMechanism(0.1, 0.8, TemperedStable(0.6, 1.2, 0.7))
        a = mech.reweighted(0.4).reweighted(0.9)
        b = mech.reweighted(1.3)
        for lam in (0.2, 1.0):
            assert a.psi(lam) == pytest.approx(b.psi(lam), rel=1e-8)

    def test_reweight_zero_is_identity(self):
        mech = binary()
        assert mech.reweighted(0.0) is mech

    def test_stable_reweighting_tempers_the_tail(self):
        """Conditioning at level u makes psi'(0+) finite."""
        mech = BranchingMechanism(0.0, 0.0, Stable(0.5, 1.0))
        rw = mech.reweighted(1.0)
        assert np.isfinite(rw.psi_deriv(2, 0.1))


class TestNodeMass:
    def test_tempered_gamma_law(self):
        """For j >= 3 the tempered mass is Gamma(j-1-beta, u+gamma)."""
        mech = BranchingMechanism(0.0, 0.0, TemperedStable(0.5, 1.0, 1.0))
        rng = np.random.default_rng(0)
        s = mech.sample_node_mass(3, 0.5, rng, size=200000)
        shape, rate = 3 - 1 - 0.5, 0.5 + 1.0
        assert np.mean(s) == pytest.approx(shape / rate, rel=0.02)
        assert np.var(s) == pytest.approx(shape / rate ** 2, rel=0.05)

    def test_mean_matches_b_ratio(self):
        mech = BranchingMechanism(0.0, 0.0, TemperedStable(0.5, 1.0, 1.0))
        rng = np.random.default_rng(1)
        for j, u in ((2, 0.3), (3, 0.0), (4, 1.0)):
            s = mech.sample_node_mass(j, u, rng, size=200000)
            se = np.std(s) / math.sqrt(len(s))
            want = mech.node_mass_mean(j, u)
            assert abs(np.mean(s) - want) < 4 * se + 1e-4

    def test_binary_atom_at_zero(self):
        """With a2 > 0 the pair law has an atom at mass 0."""
        mech = BranchingMechanism(0.0, 2.0, TemperedStable(0.5, 1.0, 1.0))
        rng = np.random.default_rng(2)
        s = mech.sample_node_mass(2, 0.0, rng, size=100000)
        i2 = mech.levy.exp_moment(2, 0.0)
        w0 = 2 * 2.0 / (2 * 2.0 + i2)
        frac = np.mean(s == 0.0)
        assert frac == pytest.approx(w0, abs=0.01)

    def test_pure_binary_mass_is_zero(self):
        rng = np.random.default_rng(3)
        assert binary().sample_node_mass(2, 0.0, rng) == 0.0

    def test_pure_stable_at_zero_rejected(self):
        mech = BranchingMechanism(0.0, 0.0, Stable(0.5, 1.0))
        with pytest.raises(ValueError):
            mech.sample_node_mass(3, 0.0, np.random.default_rng(0))


class TestImmigration:
    def test_jump_rate_matches_quadrature(self):
        mech = BranchingMechanism(0.0, 0.0, TemperedStable(0.5, 1.0, 1.0))
        u, r_min = 0.5, 0.01
        rate, sampler, comp = mech.jump_immigration(u, r_min)
        f = lambda r: r * math.exp(-(u + 1.0) * r) * 1.0 * r ** (-2.5)
        want = integrate.quad(f, r_min, np.inf)[0]
        assert rate == pytest.approx(want, rel=1e-3)
        # folded drift = expected small-jump mass per unit time
        g = lambda r: r * f(r)
        small = integrate.quad(g, 0, r_min, points=[r_min / 2])[0]
        assert comp == pytest.approx(small, rel=1e-4)

    def test_eta_reconstruction(self):
        """rate * E(1 - e^{-lam R}) + small-jump part ~ eta(u, lam)."""
        mech = BranchingMechanism(0.0, 0.7, TemperedStable(0.5, 1.0, 1.0))
        u, lam, r_min = 0.4, 0.9, 0.001
        rate, sampler, comp = mech.jump_immigration(u, r_min)
        rng = np.random.default_rng(4)
        r = sampler(rng, 400000)
        jump_part = rate * float(np.mean(-np.expm1(-lam * r)))
        total = 2 * mech.a2 * lam + comp * lam + jump_part
        assert total == pytest.approx(mech.eta(u, lam), rel=0.01)


class TestCertificate:
    def test_binary_certificate_bounds_series(self):
        mech = binary()
        lam1, x0, coeffs = mech.moment_bound_certificate(0.5, 12)
        assert lam1 > 0 and x0 > 0
        g = sum(c * lam1 ** n for n, c in enumerate(coeffs) if n >= 1)
        assert g <= x0 * (1 + 1e-9)

    def test_certificate_needs_lambda0(self):
        mech = BranchingMechanism(0.0, 2.0, Empty())
        with pytest.raises(ValueError):
            mech.moment_bound_certificate(0.5, 8)


class TestValidation:
    def test_negative_coefficients_rejected(self):
        with pytest.raises(ValueError):
            BranchingMechanism(-1.0, 0.0)

    def test_divergent_exponential_tail_rejected(self):
        with pytest.raises(ValueError):
            BranchingMechanism(0.0, 0.0, TemperedStable(0.5, 1.0, 1.0),
                               lambda0=5.0)

    def test_from_spec_round_trip(self):
        mech = from_spec({"kind": "tempered", "beta": 0.5, "gamma": 1.0,
                          "a2": 0.3, "lambda0": 0.9})
        assert mech.a2 == 0.3
        assert mech.lambda0 == 0.9
        assert mech.psi(1.0) > 0

    def test_atoms(self):
        mech = from_spec({"kind": "atoms", "atoms": [(0.5, 1.0), (2.0, 0.3)]})
        want = sum(m * (math.exp(-0.5 * r) - 1 + 0.5 * r)
                   for r, m in [(0.5, 1.0), (2.0, 0.3)])
        assert mech.psi(0.5) == pytest.approx(want, rel=1e-12)
