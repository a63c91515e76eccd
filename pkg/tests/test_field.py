import math

import numpy as np
import pytest

from superexit.field import (Domain, FieldFunction, GridOperator, Cap,
                             HarmonicKit, harmonic_extension, potential_U,
                             solve_linear, solve_semilinear,
                             solve_linearized, hitting_field, sphere_area)
from superexit.mechanism import binary, BranchingMechanism, TemperedStable


def gaussian(center, amp=0.6, width=0.25):
    c = np.asarray(center, float)

    def f(z):
        z = np.atleast_2d(z)
        return amp * np.exp(-np.sum((z - c) ** 2, axis=-1) / (2 * width ** 2))
    return f


class TestPotential:
    @pytest.mark.parametrize("d,n", [(2, 65), (3, 33)])
    def test_mean_exit_time_on_ball(self, d, n):
        """U(1) = (R^2 - |x|^2)/d for the (1/2)Laplacian on a ball."""
        dom = Domain.ball(d, radius=1.0, n=n)
        u = potential_U(dom, 1.0)
        pts = dom.points[dom.interior]
        keep = dom.boundary_distance(pts) >= 2 * dom.h
        want = (1.0 - np.sum(pts ** 2, axis=-1)) / d
        err = np.max(np.abs(u.interior_values()[keep] - want[keep]))
        assert err < 5 * dom.h ** 2

    def test_potential_matches_green_quadrature(self):
        """U f(x) as a grid solve vs closed-form Green kernel quadrature."""
        dom = Domain.ball(2, radius=1.0, n=65)
        f = gaussian([0.3, -0.2], amp=1.0, width=0.3)
        u = potential_U(dom, f)
        kit = HarmonicKit(dom, dom.center)
        x = np.array([0.1, 0.2])
        pts = dom.points[dom.interior]
        fv = f(pts)
        g = np.array([kit.green(x, p) if np.linalg.norm(p - x) > 1e-12
                      else 0.0 for p in pts])
        quad = float(np.sum(g * fv) * dom.h ** 2)
        assert u(x[None])[0] == pytest.approx(quad, rel=0.01)


class TestHarmonic:
    def test_linear_boundary_data_is_reproduced(self):
        dom = Domain.ball(2, radius=1.0, n=65)
        h = harmonic_extension(dom, lambda z: np.atleast_2d(z)[:, 0])
        pts = dom.points[dom.interior]
        keep = dom.boundary_distance(pts) >= 2 * dom.h
        err = np.max(np.abs(h.interior_values()[keep] - pts[keep, 0]))
        assert err < 5 * dom.h ** 2

    def test_center_value_is_boundary_mean(self):
        dom = Domain.ball(2, radius=1.0, n=65)
        phi = gaussian([1.0, 0.0])
        h = harmonic_extension(dom, phi)
        th = np.linspace(0, 2 * math.pi, 2000, endpoint=False)
        ring = np.stack([np.cos(th), np.sin(th)], axis=1)
        want = float(np.mean(phi(ring)))
        assert h(np.zeros((1, 2)))[0] == pytest.approx(want, rel=5e-3)


class TestSemilinear:
    @pytest.mark.parametrize("mech", [
        binary(),
        BranchingMechanism(0.2, 0.5, TemperedStable(0.5, 1.0, 1.0),
                           lambda0=0.9),
    ], ids=["binary", "tempered"])
    def test_dynkin_decomposition(self, mech):
        """u = H(phi) - U(psi(u)) on interior nodes."""
        dom = Domain.ball(2, radius=1.0, n=65)
        phi = gaussian([1.0, 0.0], amp=0.8)
        u = solve_semilinear(dom, mech, phi)
        h = harmonic_extension(dom, phi)
        psi_u = np.array([mech.psi(v) for v in u.interior_values()])
        p = potential_U(dom, psi_u)
        err = np.max(np.abs(u.interior_values()
                            - (h.interior_values() - p.interior_values())))
        assert err < 1e-6

    def test_zero_boundary_gives_zero(self):
        dom = Domain.ball(2, radius=1.0, n=33)
        zero = lambda z: np.zeros(len(np.atleast_2d(z)))
        u = solve_semilinear(dom, binary(), zero)
        assert np.max(np.abs(u.interior_values())) < 1e-10

    def test_maximum_principle(self):
        """0 <= u <= max phi since psi >= 0 on [0, inf)."""
        dom = Domain.ball(2, radius=1.0, n=65)
        phi = gaussian([1.0, 0.0], amp=0.7)
        u = solve_semilinear(dom, binary(), phi)
        vals = u.interior_values()
        assert vals.min() >= -1e-12
        assert vals.max() <= 0.7 + 1e-9

    def test_linearized_fixed_point(self):
        """v = U(source - psi'(u) v) for zero boundary data."""
        dom = Domain.ball(2, radius=1.0, n=65)
        mech = binary()
        phi = gaussian([1.0, 0.0], amp=0.8)
        u = solve_semilinear(dom, mech, phi)
        src = gaussian([-0.2, 0.4], amp=1.0)
        v = solve_linearized(dom, mech, u, src, None)
        pts = dom.points[dom.interior]
        rhs = src(pts) - 2 * mech.a2 * u.interior_values() * v.interior_values()
        w = potential_U(dom, rhs)
        err = np.max(np.abs(v.interior_values() - w.interior_values()))
        assert err < 1e-8

    def test_linearized_without_field_is_potential(self):
        dom = Domain.ball(2, radius=1.0, n=33)
        src = gaussian([0.0, 0.0], amp=1.0)
        v = solve_linearized(dom, binary(), None, src, None)
        w = potential_U(dom, src)
        assert np.allclose(v.interior_values(), w.interior_values(),
                           atol=1e-12)


class TestIterativeSolver:
    def test_iterative_path_matches_direct(self, monkeypatch):
        monkeypatch.setattr(GridOperator, "ITERATIVE_CUTOFF", 0)
        dom = Domain.ball(2, radius=1.0, n=49)
        phi = gaussian([1.0, 0.0], amp=0.8)
        u_it = solve_semilinear(dom, binary(), phi)
        monkeypatch.setattr(GridOperator, "ITERATIVE_CUTOFF", 10 ** 9)
        dom2 = Domain.ball(2, radius=1.0, n=49)
        u_dir = solve_semilinear(dom2, binary(), phi)
        err = np.max(np.abs(u_it.interior_values() - u_dir.interior_values()))
        assert err < 1e-7


class TestHarmonicKit:
    def test_poisson_density_integrates_to_one(self):
        dom = Domain.ball(2, radius=1.0, n=17)
        kit = HarmonicKit(dom, dom.center)
        y = np.array([0.3, -0.1])
        th = np.linspace(0, 2 * math.pi, 4000, endpoint=False)
        ring = np.stack([np.cos(th), np.sin(th)], axis=1)
        dens = kit.poisson(np.repeat(y[None], len(ring), 0), ring)
        total = float(np.mean(dens) * 2 * math.pi)
        assert total == pytest.approx(1.0, rel=1e-6)

    def test_martin_normalization_at_reference(self):
        dom = Domain.ball(3, radius=1.0, n=9)
        x = np.array([0.1, 0.0, 0.2])
        kit = HarmonicKit(dom, x)
        z = np.array([0.0, 1.0, 0.0])
        assert kit.martin(x[None], z[None])[0] == pytest.approx(1.0)

    def test_green_symmetry(self):
        dom = Domain.ball(3, radius=1.0, n=9)
        kit = HarmonicKit(dom, dom.center)
        y = np.array([0.2, -0.3, 0.1])
        w = np.array([-0.4, 0.1, 0.3])
        assert kit.green(y, w) == pytest.approx(kit.green(w, y), rel=1e-12)

    @pytest.mark.parametrize("d", [2, 3])
    def test_cap_measure_matches_exit_sampler(self, d):
        dom = Domain.ball(d, radius=1.0, n=9)
        kit = HarmonicKit(dom, dom.center)
        y = np.zeros(d)
        y[0] = 0.35
        zc = np.zeros(d)
        zc[1] = 1.0
        eps = 0.5
        m = kit.harmonic_measure_of_cap(y, zc, eps)
        rng = np.random.default_rng(11)
        z = kit.sample_exit(y, rng, 200000)
        freq = float(np.mean(np.linalg.norm(z - zc, axis=1) < eps))
        se = math.sqrt(m * (1 - m) / 200000)
        assert abs(freq - m) < 4 * se + 1e-4

    def test_exit_sample_mean_matches_harmonic_extension(self):
        """E phi(exit point) equals the harmonic extension at the start."""
        dom = Domain.ball(2, radius=1.0, n=65)
        kit = HarmonicKit(dom, dom.center)
        phi = gaussian([1.0, 0.0])
        h = harmonic_extension(dom, phi)
        y = np.array([0.25, 0.15])
        rng = np.random.default_rng(7)
        z = kit.sample_exit(y, rng, 100000)
        vals = phi(z)
        est = float(np.mean(vals))
        se = float(np.std(vals)) / math.sqrt(len(vals))
        assert abs(est - h(y[None])[0]) < 4 * se + 5 * dom.h ** 2


class TestHittingField:
    def test_monotone_in_cap_size(self):
        dom = Domain.ball(2, radius=1.0, n=33)
        mech = binary()
        z = np.array([1.0, 0.0])
        v_big = hitting_field(dom, mech, [Cap(z, 0.5)])
        v_small = hitting_field(dom, mech, [Cap(z, 0.3)])
        pts = dom.points[dom.interior]
        # away from the cap funnel, where the grid resolves both fields
        core = (dom.boundary_distance(pts) >= 3 * dom.h) \
            & (np.linalg.norm(pts - z, axis=1) >= 0.7)
        big = v_big.interior_values()[core]
        small = v_small.interior_values()[core]
        assert np.all(small <= big + 1e-8)
        assert np.all(small >= 0)
        assert small.max() > 0

    def test_two_caps_dominate_each_single_cap(self):
        dom = Domain.ball(2, radius=1.0, n=33)
        mech = binary()
        caps = [Cap(np.array([1.0, 0.0]), 0.4),
                Cap(np.array([-1.0, 0.0]), 0.4)]
        v12 = hitting_field(dom, mech, caps)
        v1 = hitting_field(dom, mech, caps[:1])
        pts = dom.points[dom.interior]
        core = dom.boundary_distance(pts) >= 3 * dom.h
        assert np.all(v12.interior_values()[core]
                      >= v1.interior_values()[core] - 1e-8)


class TestFieldFunction:
    def test_callable_round_trip(self):
        dom = Domain.ball(2, radius=1.0, n=33)
        f = FieldFunction.from_callable(
            dom, lambda p: np.atleast_2d(p)[:, 0] + 1.0)
        pts = dom.points[dom.interior]
        assert np.allclose(f(pts), pts[:, 0] + 1.0, atol=1e-10)

    def test_evaluation_clamps_to_grid_box(self):
        dom = Domain.ball(2, radius=1.0, n=33)
        f = FieldFunction.from_callable(
            dom, lambda p: np.atleast_2d(p)[:, 0])
        far = np.array([[5.0, 5.0]])
        corner = np.array([[1.0, 1.0]])
        assert f(far)[0] == pytest.approx(f(corner)[0])
