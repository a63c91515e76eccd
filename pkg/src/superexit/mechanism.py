"""Branching-mechanism calculus.

A mechanism is the triple (a1, a2, pi) defining

    psi(lam) = a1*lam + a2*lam**2 + int (exp(-lam*r) - 1 + lam*r) pi(dr)

with a1, a2 >= 0 and int min(r, r**2) pi(dr) < infinity.  Jump measures
are parametric families plus a tabulated fallback; all integrals go
through adaptive quadrature split at r=1 with the substitution r -> 1/s
on the tail.
"""

import math

import numpy as np
from scipy import integrate

QUAD_EPSABS = 1e-10
QUAD_EPSREL = 1e-9
R_MIN_JUMP = 1e-6


def _quad_split(f):
    """Integrate f over (0, inf): direct on (0,1], substituted on [1, inf)."""
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        lo, err_lo = integrate.quad(f, 0.0, 1.0,
                                    epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL,
                                    limit=200)
        hi, err_hi = integrate.quad(lambda s: f(1.0 / s) / s ** 2, 0.0, 1.0,
                                    epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL,
                                    limit=200)
    total = lo + hi
    err = err_lo + err_hi
    if not np.isfinite(total):
        raise ArithmeticError("jump-measure quadrature diverged")
    if abs(total) > 1e-12 and err > 1e-6 * abs(total) + 5e-8:
        raise ArithmeticError("jump-measure quadrature did not converge "
                              "(err=%g, val=%g)" % (err, total))
    return total


class LevyMeasure:
    """Base class; subclasses provide a density or atoms."""

    is_empty = False

    def density(self, r):
        raise NotImplementedError

    def tail_power(self):
        """p with density ~ r^-p at infinity, or None for exponential decay."""
        raise NotImplementedError

    def converges_at_infinity(self, k, s):
        """True when int_1^inf r^k e^{-s r} pi(dr) is finite."""
        if s > 0:
            return True
        p = self.tail_power()
        return p is not None and k - p < -1

    def exp_moment(self, k, s):
        """int r^k exp(-s*r) pi(dr) for integer k >= 1."""
        if not self.converges_at_infinity(k, s):
            raise ValueError("moment of order %d diverges at s=%g" % (k, s))
        return _quad_split(lambda r: r ** k * math.exp(-s * r) * self.density(r))

    def psi_integral(self, lam):
        def f(r):
            x = lam * r
            # expm1 keeps precision for small x
            return (math.expm1(-x) + x) * self.density(r)
        return _quad_split(f)

    def drift_shift(self, u):
        """int r (1 - e^{-u r}) pi(dr)."""
        if u == 0:
            return 0.0
        return _quad_split(lambda r: r * -math.expm1(-u * r) * self.density(r))

    def eta_integral(self, u, lam):
        """int r e^{-u r} (1 - e^{-lam r}) pi(dr)."""
        if lam == 0:
            return 0.0
        return _quad_split(
            lambda r: r * math.exp(-u * r) * -math.expm1(-lam * r)
            * self.density(r))

    def min_moment(self):
        return _quad_split(lambda r: min(r, r * r) * self.density(r))

    def exp_tail_finite(self, lam0):
        """True when int_1^inf e^{r lam0} pi(dr) < inf."""
        return False

    def tilt(self, u):
        """The measure e^{-u r} pi(dr)."""
        raise NotImplementedError


class Empty(LevyMeasure):
    is_empty = True

    def density(self, r):
        return 0.0

    def tail_power(self):
        return None

    def exp_moment(self, k, s):
        return 0.0

    def psi_integral(self, lam):
        return 0.0

    def drift_shift(self, u):
        return 0.0

    def eta_integral(self, u, lam):
        return 0.0

    def min_moment(self):
        return 0.0

    def exp_tail_finite(self, lam0):
        return True

    def tilt(self, u):
        return self


class Stable(LevyMeasure):
    """Density c * r^-(beta+2) on (0, inf), 0 < beta < 1."""

    def __init__(self, beta, c=1.0):
        if not 0.0 < beta < 1.0:
            raise ValueError("beta must lie in (0,1)")
        if c <= 0:
            raise ValueError("c must be positive")
        self.beta = beta
        self.c = c

    def density(self, r):
        return self.c * r ** (-(self.beta + 2.0))

    def tail_power(self):
        return self.beta + 2.0

    def exp_tail_finite(self, lam0):
        return False

    def drift_shift(self, u):
        # int r (1 - e^{-ur}) density = c Gamma(1-beta) u^beta / beta
        if u == 0:
            return 0.0
        b = self.beta
        return self.c * math.gamma(1.0 - b) * u ** b / b

    def eta_integral(self, u, lam):
        b = self.beta
        return (self.c * math.gamma(1.0 - b) / b
                * ((u + lam) ** b - u ** b))

    def tilt(self, u):
        if u == 0:
            return self
        return TemperedStable(self.beta, u, self.c)

    def __repr__(self):
        return "Stable(beta=%g, c=%g)" % (self.beta, self.c)


class TemperedStable(LevyMeasure):
    """Density c * r^-(beta+2) * exp(-gamma r), gamma > 0."""

    def __init__(self, beta, gamma, c=1.0):
        if not 0.0 < beta < 1.0:
            raise ValueError("beta must lie in (0,1)")
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        if c <= 0:
            raise ValueError("c must be positive")
        self.beta = beta
        self.gamma = gamma
        self.c = c

    def density(self, r):
        return self.c * r ** (-(self.beta + 2.0)) * math.exp(-self.gamma * r)

    def tail_power(self):
        return None

    def converges_at_infinity(self, k, s):
        return s + self.gamma > 0

    def exp_tail_finite(self, lam0):
        return lam0 < self.gamma

    def drift_shift(self, u):
        if u == 0:
            return 0.0
        b, g = self.beta, self.gamma
        return (self.c * math.gamma(1.0 - b) / b
                * ((g + u) ** b - g ** b))

    def eta_integral(self, u, lam):
        b, g = self.beta, self.gamma
        return (self.c * math.gamma(1.0 - b) / b
                * ((g + u + lam) ** b - (g + u) ** b))

    def tilt(self, u):
        if u == 0:
            return self
        return TemperedStable(self.beta, self.gamma + u, self.c)

    def __repr__(self):
        return "TemperedStable(beta=%g, gamma=%g, c=%g)" % (
            self.beta, self.gamma, self.c)


class AtomList(LevyMeasure):
    """Finite list of (location, mass) atoms."""

    def __init__(self, atoms):
        atoms = [(float(r), float(m)) for r, m in atoms]
        if any(r <= 0 or m < 0 for r, m in atoms):
            raise ValueError("atoms need positive locations, nonneg masses")
        self.atoms = atoms

    def tail_power(self):
        return None

    def converges_at_infinity(self, k, s):
        return True

    def exp_moment(self, k, s):
        return sum(m * r ** k * math.exp(-s * r) for r, m in self.atoms)

    def psi_integral(self, lam):
        return sum(m * (math.expm1(-lam * r) + lam * r) for r, m in self.atoms)

    def drift_shift(self, u):
        return sum(m * r * -math.expm1(-u * r) for r, m in self.atoms)

    def eta_integral(self, u, lam):
        return sum(m * r * math.exp(-u * r) * -math.expm1(-lam * r)
                   for r, m in self.atoms)

    def min_moment(self):
        return sum(m * min(r, r * r) for r, m in self.atoms)

    def exp_tail_finite(self, lam0):
        return True

    def tilt(self, u):
        return AtomList([(r, m * math.exp(-u * r)) for r, m in self.atoms])

    def __repr__(self):
        return "AtomList(%r)" % (self.atoms,)


class TabulatedDensity(LevyMeasure):
    """Density given on a grid with declared power-law tails.

    Between grid points the log-density is interpolated linearly.  Below
    the first grid point the density is C0 * r^-p0, above the last it is
    Cinf * r^-pinf (matched continuously); pinf may be None for a
    compactly supported table (density 0 beyond the grid).
    """

    def __init__(self, r_grid, dens, p0, p_inf):
        r_grid = np.asarray(r_grid, dtype=float)
        dens = np.asarray(dens, dtype=float)
        if r_grid.ndim != 1 or np.any(np.diff(r_grid) <= 0) or np.any(r_grid <= 0):
            raise ValueError("r grid must be positive increasing")
        if np.any(dens <= 0):
            raise ValueError("tabulated density must be positive")
        self.r_grid = r_grid
        self.dens = dens
        self.p0 = float(p0)
        self.p_inf = None if p_inf is None else float(p_inf)
        self._logr = np.log(r_grid)
        self._logd = np.log(dens)

    def density(self, r):
        g = self.r_grid
        if r < g[0]:
            return self.dens[0] * (r / g[0]) ** (-self.p0)
        if r > g[-1]:
            if self.p_inf is None:
                return 0.0
            return self.dens[-1] * (r / g[-1]) ** (-self.p_inf)
        ld = np.interp(math.log(r), self._logr, self._logd)
        return math.exp(ld)

    def tail_power(self):
        return self.p_inf

    def exp_tail_finite(self, lam0):
        return self.p_inf is None

    def tilt(self, u):
        new = self.dens * np.exp(-u * self.r_grid)
        # tilted tails are no longer pure power laws; the head still is,
        # the tail is dominated by the exponential so declare p_inf=None
        # only when the table already ends the support
        if self.p_inf is None:
            return TabulatedDensity(self.r_grid, new, self.p0, None)
        # extend the table far enough that the cut tail mass is negligible
        r_ext = np.geomspace(self.r_grid[-1], self.r_grid[-1] + 50.0 / u, 200)[1:]
        d_ext = np.array([self.density(r) * math.exp(-u * r) for r in r_ext])
        keep = d_ext > 0
        return TabulatedDensity(np.concatenate([self.r_grid, r_ext[keep]]),
                                np.concatenate([new, d_ext[keep]]),
                                self.p0, None)

    def __repr__(self):
        return "TabulatedDensity(%d pts, p0=%g, p_inf=%r)" % (
            len(self.r_grid), self.p0, self.p_inf)


class BranchingMechanism:
    """Immutable (a1, a2, levy) triple with the psi calculus."""

    def __init__(self, a1=0.0, a2=0.0, levy=None, lambda0=None):
        if a1 < 0 or a2 < 0:
            raise ValueError("a1 and a2 must be nonnegative")
        self.a1 = float(a1)
        self.a2 = float(a2)
        self.levy = levy if levy is not None else Empty()
        mm = self.levy.min_moment()
        if not np.isfinite(mm):
            raise ValueError("int min(r, r^2) pi(dr) diverges")
        if lambda0 is not None:
            if lambda0 <= 0:
                raise ValueError("lambda0 must be positive")
            if not self.levy.exp_tail_finite(float(lambda0)):
                raise ValueError("exponential tail integral diverges at "
                                 "lambda0=%g" % lambda0)
        self.lambda0 = None if lambda0 is None else float(lambda0)
        self._cache = {}

    # -- evaluation ------------------------------------------------------

    def psi(self, lam):
        if lam < 0:
            raise ValueError("lam must be nonnegative")
        if lam == 0:
            return 0.0
        key = ("psi", lam)
        if key not in self._cache:
            self._cache[key] = (self.a1 * lam + self.a2 * lam ** 2
                                + self.levy.psi_integral(lam))
        return self._cache[key]

    def psi_deriv(self, m, lam):
        """m-th derivative of psi at lam."""
        if m < 1:
            raise ValueError("m must be >= 1")
        if lam < 0:
            raise ValueError("lam must be nonnegative")
        key = ("d", m, lam)
        if key in self._cache:
            return self._cache[key]
        if m == 1:
            if lam == 0:
                # needs int_1^inf r pi(dr) < inf
                if not self.levy.converges_at_infinity(1, 0.0):
                    raise ValueError("first moment of the jump measure "
                                     "diverges; psi'(0) undefined")
                val = self.a1
            else:
                val = (self.a1 + 2 * self.a2 * lam
                       + self.levy.drift_shift(lam))
        else:
            quad = 2 * self.a2 if m == 2 else 0.0
            val = (-1) ** m * (quad + self.levy.exp_moment(m, lam))
        self._cache[key] = val
        return val

    def b_coeff(self, m, u):
        """(-1)^m psi^(m)(u), nonnegative, decreasing in u (m >= 2)."""
        if m < 2:
            raise ValueError("m must be >= 2")
        return (-1) ** m * self.psi_deriv(m, u)

    def eta(self, u, lam):
        """psi'(u + lam) - psi'(u), the branch-immigration exponent."""
        if u < 0 or lam < 0:
            raise ValueError("u, lam must be nonnegative")
        if lam == 0:
            return 0.0
        return 2 * self.a2 * lam + self.levy.eta_integral(u, lam)

    def reweighted(self, u):
        """The mechanism psi(u + .) - psi(u) in canonical form."""
        if u < 0:
            raise ValueError("u must be nonnegative")
        if u == 0:
            return self
        a1 = self.a1 + 2 * self.a2 * u + self.levy.drift_shift(u)
        if self.lambda0 is not None:
            lam0 = self.lambda0 + u
        elif not self.levy.is_empty and self.levy.tail_power() is not None:
            lam0 = 0.99 * u
        else:
            lam0 = None
        return BranchingMechanism(a1, self.a2, self.levy.tilt(u), lam0)

    # -- sampling --------------------------------------------------------

    def sample_node_mass(self, j, u, rng, size=None):
        """Sample the node-immigration mass law for a j-fold branch point.

        Density proportional to r^j e^{-u r} pi(dr) for j >= 3; for j = 2
        there is additionally an atom at 0 of weight 2 a2 / (2 a2 + I2).
        """
        if j < 2:
            raise ValueError("j must be >= 2")
        n = 1 if size is None else int(size)
        lv = self.levy
        if lv.is_empty:
            if j == 2 and self.a2 > 0:
                out = np.zeros(n)
                return out[0] if size is None else out
            raise ValueError("degenerate node-mass law")
        if isinstance(lv, (Stable, TemperedStable)):
            rate = u + getattr(lv, "gamma", 0.0)
            if rate <= 0:
                raise ValueError("node-mass law not normalizable at u=0 "
                                 "for a pure stable jump measure")
            shape = j - 1.0 - lv.beta
            samp = rng.gamma(shape, 1.0 / rate, size=n)
        elif isinstance(lv, AtomList):
            w = np.array([m * r ** j * math.exp(-u * r) for r, m in lv.atoms])
            if w.sum() <= 0 and not (j == 2 and self.a2 > 0):
                raise ValueError("degenerate node-mass law")
            locs = np.array([r for r, _ in lv.atoms])
            if w.sum() > 0:
                samp = rng.choice(locs, size=n, p=w / w.sum())
            else:
                samp = np.zeros(n)
        else:
            samp = _tabulated_weighted_sample(lv, j, u, rng, n)
        if j == 2 and self.a2 > 0:
            i2 = lv.exp_moment(2, u)
            w0 = 2 * self.a2 / (2 * self.a2 + i2)
            samp = np.where(rng.random(n) < w0, 0.0, samp)
        return samp[0] if size is None else samp

    def node_mass_mean(self, j, u):
        """Mean of the node-mass law: b(j+1,u)/b(j,u)."""
        return self.b_coeff(j + 1, u) / self.b_coeff(j, u)

    def jump_immigration(self, u, r_min=R_MIN_JUMP):
        """(rate, size sampler, compensator drift) for the branch-immigration
        jump part at reweighting level u.

        Jumps of size r arrive with intensity r e^{-u r} pi(dr); jumps
        below r_min are folded into a deterministic drift equal to their
        expected mass per unit time.
        """
        lv = self.levy
        if lv.is_empty:
            return 0.0, None, 0.0
        if isinstance(lv, AtomList):
            rates = np.array([m * r * math.exp(-u * r) for r, m in lv.atoms])
            locs = np.array([r for r, _ in lv.atoms])
            tot = rates.sum()
            if tot == 0:
                return 0.0, None, 0.0
            p = rates / tot

            def sampler(rng, size):
                return rng.choice(locs, size=size, p=p)
            return tot, sampler, 0.0
        # continuous densities: tabulate the truncated jump density
        def nu(r):
            return r * math.exp(-u * r) * lv.density(r)
        r_hi = _jump_upper_cut(lv, u)
        grid = np.geomspace(r_min, r_hi, 800)
        vals = np.array([nu(r) for r in grid])
        cum = integrate.cumulative_trapezoid(vals, grid, initial=0.0)
        tot = cum[-1]
        if tot <= 0:
            return 0.0, None, 0.0
        cdf = cum / tot
        comp, _ = integrate.quad(lambda r: r * nu(r), 0.0, r_min,
                                 epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL)

        def sampler(rng, size):
            return np.interp(rng.random(size), cdf, grid)
        return tot, sampler, comp

    def sample_branch_immigration(self, u_path, lam_probe, t_end, rng,
                                  n_steps=200):
        """One draw of the immigrated-mass functional L_{t_end}.

        u_path maps time to the local reweighting level; the linear part
        of eta is a deterministic drift 2 a2 per unit time, the jump part
        is a marked Poisson process with the truncation compensator in
        the drift.
        """
        if t_end == 0:
            return 0.0
        dt = t_end / n_steps
        total = 2 * self.a2 * t_end
        if self.levy.is_empty:
            return total
        last_u = None
        rate = sampler = comp = None
        for i in range(n_steps):
            u = float(u_path(i * dt))
            if last_u is None or abs(u - last_u) > 1e-12:
                rate, sampler, comp = self.jump_immigration(u)
                last_u = u
            total += comp * dt
            if rate > 0:
                k = rng.poisson(rate * dt)
                if k:
                    total += sampler(rng, k).sum()
        return total

    # -- exponential-moment certificate ---------------------------------

    def moment_bound_certificate(self, mean_exit_time_bound, N):
        """Upper-bound recursion for moments of the total exit mass.

        Returns (lambda1, x0, g_coeffs) with g(lam) = sum g_coeffs[n] lam^n
        (n from 1) certifying g(lam) <= x0 on [0, lambda1].
        """
        if self.lambda0 is None:
            raise ValueError("certificate needs exponential integrability "
                             "(lambda0)")
        K = float(mean_exit_time_bound)
        if K <= 0 or N < 1:
            raise ValueError("need K > 0 and N >= 1")
        m = {2: 2 * self.a2 + self.levy.exp_moment(2, 0.0)}
        for j in range(3, N + 1):
            m[j] = self.levy.exp_moment(j, 0.0)
        # h[n] = c_n / n!; c_1 = 1
        h = np.zeros(N + 1)
        h[1] = 1.0
        for n in range(2, N + 1):
            conv = np.zeros(N + 1)
            conv[0] = 1.0
            acc = 0.0
            for j in range(1, n + 1):
                conv = np.convolve(conv, h)[:N + 1]
                if j >= 2:
                    acc += m.get(j, 0.0) / math.factorial(j) * conv[n]
            h[n] = K * acc

        def psit(x):
            # the moment series sum_{j>=2} m_j x^j / j!; this dominates
            # psi - a1 x - a2 x^2 and is what the recursion bound needs
            if x == 0:
                return 0.0
            if self.levy.is_empty:
                tail = 0.0
            elif isinstance(self.levy, AtomList):
                tail = sum(mm * (math.expm1(x * r) - x * r)
                           for r, mm in self.levy.atoms)
            else:
                def f(r):
                    d = self.levy.density(r)
                    if d <= 0.0:
                        return 0.0
                    z = x * r
                    if z < 500.0:
                        return (math.expm1(z) - z) * d
                    # log space so the tempering in d cancels the growth
                    return math.exp(z + math.log(d)) - (1.0 + z) * d
                tail = _quad_split(f)
            return self.a2 * x * x + tail

        lam_hi = 0.99 * self.lambda0
        xs = np.linspace(lam_hi / 10000.0, lam_hi, 10000)
        best = None
        step = xs[1] - xs[0]
        pt = np.array([psit(x) for x in xs])
        # secant condition: difference quotients to the left of x0 stay
        # below 1/K; by convexity the left slope at x0 is the worst case
        slopes = np.empty_like(pt)
        slopes[0] = pt[0] / xs[0]
        slopes[1:] = (pt[1:] - pt[:-1]) / step
        ok = slopes < 1.0 / K
        lam1s = np.where(ok, xs - K * pt, -np.inf)
        i = int(np.argmax(lam1s))
        if not ok[i] or lam1s[i] <= 0:
            raise ValueError("no valid x0: mechanism too heavy-tailed "
                             "for this exit-time bound")
        x0 = float(xs[i])
        lam1 = float(lam1s[i])
        # direct certification of g_N <= x0 on [0, lam1]
        lams = np.linspace(0.0, lam1, 200)
        g = sum(h[n] * lams ** n for n in range(1, N + 1))
        if np.max(g) > x0 * (1 + 1e-12):
            raise ValueError("certificate check failed: g_N exceeds x0")
        return lam1, x0, h

    def g_eval(self, h, lam):
        lam = np.asarray(lam, dtype=float)
        return sum(h[n] * lam ** n for n in range(1, len(h)))

    def tabulate(self, lam_max, n=600):
        """Fast vectorized psi and psi' on [0, lam_max] via spline."""
        from scipy.interpolate import CubicSpline
        lams = np.linspace(0.0, lam_max, n)
        vals = np.array([self.psi(l) for l in lams])
        sp = CubicSpline(lams, vals)
        dsp = sp.derivative()
        return sp, dsp

    def __repr__(self):
        return "BranchingMechanism(a1=%g, a2=%g, levy=%r, lambda0=%r)" % (
            self.a1, self.a2, self.levy, self.lambda0)


def _jump_upper_cut(lv, u):
    """Radius beyond which the jump intensity mass is negligible."""
    decay = u + getattr(lv, "gamma", 0.0)
    if decay > 0:
        return max(1.0, 60.0 / decay)
    p = lv.tail_power()
    if p is not None and p > 2.0:
        # intensity r^{1-p}: choose cut with tail mass < 1e-12 relative
        return 1e12 ** (1.0 / (p - 2.0))
    raise ValueError("jump intensity has no integrable tail at u=0")


def _tabulated_weighted_sample(lv, j, u, rng, n):
    r_hi = _jump_upper_cut(lv, u)
    grid = np.geomspace(1e-8, r_hi, 1200)
    w = np.array([r ** j * math.exp(-u * r) * lv.density(r) for r in grid])
    cum = integrate.cumulative_trapezoid(w, grid, initial=0.0)
    if cum[-1] <= 0:
        raise ValueError("degenerate node-mass law")
    return np.interp(rng.random(n), cum / cum[-1], grid)


def binary(a2=2.0, a1=0.0):
    """The quadratic mechanism a1*lam + a2*lam^2."""
    # any positive lambda0 is valid when there are no jumps
    return BranchingMechanism(a1, a2, Empty(), lambda0=10.0)


def stable_cbeta(beta, c=1.0):
    """Closed-form constant in psi(lam) = c_beta lam^(1+beta) for Stable."""
    return c * math.gamma(1.0 - beta) / (beta * (1.0 + beta))


def from_spec(spec):
    """Build a mechanism from a flat key/value dict (config files)."""
    kind = spec.get("kind", "empty").lower()
    a1 = float(spec.get("a1", 0.0))
    a2 = float(spec.get("a2", 0.0))
    lambda0 = spec.get("lambda0")
    lambda0 = None if lambda0 in (None, "") else float(lambda0)
    if kind == "empty":
        levy = Empty()
    elif kind == "stable":
        levy = Stable(float(spec["beta"]), float(spec.get("c", 1.0)))
    elif kind in ("tempered", "tempered_stable", "temperedstable"):
        levy = TemperedStable(float(spec["beta"]), float(spec["gamma"]),
                              float(spec.get("c", 1.0)))
    elif kind == "atoms":
        levy = AtomList(spec["atoms"])
    elif kind == "tabulated":
        import numpy as _np
        tab = _np.loadtxt(spec["path"])
        levy = TabulatedDensity(tab[:, 0], tab[:, 1],
                                float(spec["p0"]), spec.get("p_inf"))
    else:
        raise ValueError("unknown mechanism kind %r" % kind)
    return BranchingMechanism(a1, a2, levy, lambda0)
