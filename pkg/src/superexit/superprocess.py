"""Branching-particle approximation of the measure-valued process and its
exit measures, plus the Monte Carlo estimators built on it.

Particles carry mass 1/K.  The composite branching scheme:

  * a1: pure killing at rate a1,
  * a2: critical binary branching at rate 2*a2*K (gives exactly a2*lam^2),
  * jump measure: per-particle trigger at rate Lambda/K with Lambda the
    truncated jump intensity; a trigger of size r adds Poisson(r*K)
    particles; the compensator int r pi(dr) over [r_min, inf) is a pure
    killing rate; jumps below r_min fold into the quadratic term.

The scheme is validated through the Laplace-functional calibration
(the semilinear boundary solve), not asserted a priori.

The excursion normalization starts n0 = max(1, gamma0*K) particles
(mass gamma = n0/K) and weighs outcomes by 1/gamma.
"""

import math
from dataclasses import dataclass, field as dfield

import numpy as np
from scipy import integrate

from .field import FieldFunction


@dataclass
class EstimatorResult:
    mean: float
    stderr: float
    replicas: int
    seed: object = None
    aborts: int = 0
    extra: dict = dfield(default_factory=dict)

    def z_against(self, other):
        """z-score of the difference against another estimate or a number."""
        if isinstance(other, EstimatorResult):
            diff = self.mean - other.mean
            se = math.hypot(self.stderr, other.stderr)
        else:
            diff = self.mean - float(other)
            se = self.stderr
        if se == 0:
            return 0.0 if diff == 0 else math.inf
        return diff / se


@dataclass
class ExitMeasure:
    points: np.ndarray     # (m, d) boundary atoms
    masses: np.ndarray     # (m,)
    domain_index: int = 0

    def integrate(self, f):
        if len(self.points) == 0:
            return 0.0
        return float(np.sum(self.masses * np.asarray(f(self.points), float)))

    @property
    def total_mass(self):
        return float(self.masses.sum())


class ParticleSystem:
    """Branching Brownian particle scheme for one mechanism on one domain.

    u_field, when given, reweights the mechanism spatially:
    psi_y(lam) = psi(u(y) + lam) - psi(u(y)), realized by killing-rate and
    jump-thinning corrections evaluated at each particle's position.
    """

    def __init__(self, mech, domain, K=100, dt=None, r_min=0.01,
                 gamma0=0.01, cap=10 ** 7, u_field=None):
        self.mech = mech
        self.domain = domain
        self.K = int(K)
        self.dt = float(dt) if dt is not None else domain.h ** 2 / 4.0
        self.r_min = float(r_min)
        self.gamma0 = float(gamma0)
        self.cap = int(cap)
        self.u_field = u_field
        self._prepare_rates()

    def _prepare_rates(self):
        m = self.mech
        lv = m.levy
        self.rate_binary = 2.0 * m.a2 * self.K
        if lv.is_empty:
            self.jump_rate0 = 0.0
            self.jump_sampler = None
            self.a2_extra = 0.0
            self._mbar = lambda u: 0.0
            self._dshift = lambda u: 0.0
            return
        # truncated jump intensity Lambda0 = pi([r_min, inf)) and sampler
        from .mechanism import AtomList
        if isinstance(lv, AtomList):
            locs = np.array([r for r, _ in lv.atoms])
            ws = np.array([w for _, w in lv.atoms])
            keep = locs >= self.r_min
            small = ~keep
            self.a2_extra = 0.5 * float(np.sum(ws[small] * locs[small] ** 2))
            locs, ws = locs[keep], ws[keep]
            self.jump_rate0 = float(ws.sum())
            p = ws / ws.sum() if ws.sum() > 0 else None

            def sampler(rng, size):
                return rng.choice(locs, size=size, p=p)
            self.jump_sampler = sampler if p is not None else None
            grid_u = np.linspace(0.0, 50.0, 200)
            mbar_tab = np.array([np.sum(ws * locs * np.exp(-u * locs))
                                 for u in grid_u])
            dsh_tab = np.array([lv.drift_shift(u) for u in grid_u])
        else:
            r_hi = _tail_cut(lv)
            grid = np.geomspace(self.r_min, r_hi, 1500)
            dens = np.array([lv.density(r) for r in grid])
            cum = integrate.cumulative_trapezoid(dens, grid, initial=0.0)
            self.jump_rate0 = float(cum[-1])
            cdf = cum / cum[-1]
            g = grid

            def sampler(rng, size):
                return np.interp(rng.random(size), cdf, g)
            self.jump_sampler = sampler
            small, _ = integrate.quad(lambda r: r * r * lv.density(r),
                                      0.0, self.r_min)
            self.a2_extra = 0.5 * small
            grid_u = np.linspace(0.0, 50.0, 120)
            mbar_tab = np.array([
                np.trapz(grid * np.exp(-u * grid) * dens, grid)
                for u in grid_u])
            dsh_tab = np.array([lv.drift_shift(u) for u in grid_u])
        self._mbar = lambda u: np.interp(u, grid_u, mbar_tab)
        self._dshift = lambda u: np.interp(u, grid_u, dsh_tab)
        self.rate_binary = 2.0 * (self.mech.a2 + self.a2_extra) * self.K

    @property
    def a2_eff(self):
        return self.mech.a2 + self.a2_extra

    def initial_count(self):
        return max(1, int(round(self.gamma0 * self.K)))

    def gamma(self):
        return self.initial_count() / self.K

    def run_batch(self, starts, rep, stages, domains, rng,
                  collectors, collect_atoms=False, max_steps=None):
        """Advance particles until every one has left the last domain.

        starts: (N, d) positions; rep: replica ids; stages: per-particle
        index into domains (innermost not yet exited).  collectors:
        list (one per domain) of lists of vectorized boundary functions;
        accumulated sums land in the returned acc array with layout
        acc[dom][fn][replica].  Returns (acc, atoms, aborted_reps).
        """
        d = self.domain.d
        K = self.K
        dt = self.dt
        sdt = math.sqrt(dt)
        n_rep = int(rep.max()) + 1 if len(rep) else 0
        acc = [np.zeros((len(fns), n_rep)) for fns in collectors]
        atoms = [[] for _ in domains] if collect_atoms else None
        pos = np.array(starts, float, copy=True)
        rep = np.array(rep, np.int64, copy=True)
        stg = np.array(stages, np.int64, copy=True)
        aborted = np.zeros(n_rep, dtype=bool)
        a1 = self.mech.a1
        # critical binary at rate 2*a2_eff*K = die-with-0 at a2_eff*K
        # plus duplicate at a2_eff*K
        p_half = self.rate_binary * dt / 2.0
        p_jmp = self.jump_rate0 / K * dt
        steps = 0
        hard_cap = max_steps or 10 ** 7
        while len(pos) and steps < hard_cap:
            steps += 1
            if len(pos) > self.cap:
                bad = np.unique(rep)
                aborted[bad] = True
                break
            old = pos
            pos = pos + rng.standard_normal(pos.shape) * sdt
            # stage-wise exit detection
            exited = np.zeros(len(pos), dtype=bool)
            for s in np.unique(stg):
                sel = stg == s
                out = ~domains[s].contains(pos[sel])
                if not np.any(out):
                    continue
                ids = np.nonzero(sel)[0][out]
                cross = domains[s].crossing_point(old[ids], pos[ids])
                rsel = rep[ids]
                for j, fn in enumerate(collectors[s]):
                    np.add.at(acc[s][j], rsel,
                              np.asarray(fn(cross), float) / K)
                if collect_atoms:
                    atoms[s].append((cross, rsel))
                if s + 1 < len(domains):
                    pos[ids] = cross
                    stg[ids] = s + 1
                else:
                    exited[ids] = True
            if np.any(exited):
                keep = ~exited
                pos, rep, stg = pos[keep], rep[keep], stg[keep]
                if not len(pos):
                    break
            # reweighting level at current positions
            if self.u_field is not None:
                u = np.maximum(self.u_field(pos), 0.0)
                kill_rate = (a1 + 2.0 * self.mech.a2 * u
                             + self._dshift(u) + self._mbar(u))
            else:
                u = None
                kill_rate = a1 + (self._mbar(0.0) if self.jump_sampler else 0.0)
            draw = rng.random(len(pos))
            p_kill = (kill_rate * dt if np.ndim(kill_rate) else
                      np.full(len(pos), kill_rate * dt))
            killed = draw < p_kill + p_half
            born = (draw >= p_kill + p_half) & (draw < p_kill + 2 * p_half)
            trig = ((draw >= p_kill + 2 * p_half)
                    & (draw < p_kill + 2 * p_half + p_jmp))
            new_parts = [pos[born]]
            if np.any(trig) and self.jump_sampler is not None:
                tid = np.nonzero(trig)[0]
                r = self.jump_sampler(rng, len(tid))
                if u is not None:
                    accept = rng.random(len(tid)) < np.exp(-r * u[tid])
                    tid, r = tid[accept], r[accept]
                if len(tid):
                    k = rng.poisson(r * K)
                    repeat = np.repeat(tid, k)
                    new_parts.append(pos[repeat])
                    new_rep = [rep[born], rep[repeat]]
                    new_stg = [stg[born], stg[repeat]]
                else:
                    new_rep = [rep[born]]
                    new_stg = [stg[born]]
            else:
                new_rep = [rep[born]]
                new_stg = [stg[born]]
            keep = ~killed
            pos = np.concatenate([pos[keep]] + new_parts)
            rep = np.concatenate([rep[keep]] + new_rep)
            stg = np.concatenate([stg[keep]] + new_stg)
        return acc, atoms, aborted


def _tail_cut(lv):
    decay = getattr(lv, "gamma", 0.0)
    if decay > 0:
        return max(1.0, 80.0 / decay)
    p = lv.tail_power()
    if p is not None and p > 2.0:
        return max(1.0, 1e10 ** (1.0 / (p - 1.0)))
    return 1e4


def _batched(ps, x, domains, collectors, replicas, seed, per_batch=4000,
             weight_fn=None, collect=None):
    """Run replicas in batches; reduce per-replica accumulator rows.

    weight_fn maps acc (list of (n_fn, n_rep) arrays) to a per-replica
    statistic; returns samples array and abort count.
    """
    ss = np.random.SeedSequence(seed)
    n0 = ps.initial_count()
    samples = []
    aborts = 0
    done = 0
    while done < replicas:
        b = min(per_batch, replicas - done)
        rng = np.random.default_rng(ss.spawn(1)[0])
        starts = np.repeat(np.asarray(x, float)[None, :], b * n0, axis=0)
        rep = np.repeat(np.arange(b), n0)
        stg = np.zeros(b * n0, dtype=np.int64)
        acc, _, aborted = ps.run_batch(starts, rep, stg, domains, rng,
                                       collectors)
        vals = weight_fn(acc)
        ok = ~aborted
        samples.append(vals[ok])
        aborts += int(aborted.sum())
        done += b
    return np.concatenate(samples), aborts


def _result(samples, gamma, seed, aborts, scale=1.0):
    w = samples * (scale / gamma)
    n = len(w)
    return EstimatorResult(float(w.mean()), float(w.std(ddof=1) / math.sqrt(n)),
                           n, seed=seed, aborts=aborts)


def sample_excursion_exit(ps, x, nested, rng):
    """One weighted excursion: exit measures for each nested subdomain.

    Returns (weight, [ExitMeasure ...]); estimators average
    weight * functional(exit measures) over replicas.
    """
    n0 = ps.initial_count()
    starts = np.repeat(np.asarray(x, float)[None, :], n0, axis=0)
    rep = np.zeros(n0, dtype=np.int64)
    stg = np.zeros(n0, dtype=np.int64)
    collectors = [[] for _ in nested]
    _, atoms, aborted = ps.run_batch(starts, rep, stg, nested, rng,
                                     collectors, collect_atoms=True)
    if aborted.any():
        raise RuntimeError("excursion aborted at particle cap")
    out = []
    for k, blocks in enumerate(atoms):
        if blocks:
            pts = np.concatenate([b[0] for b in blocks])
        else:
            pts = np.zeros((0, ps.domain.d))
        out.append(ExitMeasure(pts, np.full(len(pts), 1.0 / ps.K), k))
    return 1.0 / ps.gamma(), out


def estimate_laplace(ps, x, phi, replicas, seed=0, domains=None):
    """Estimate the excursion Laplace functional N_x(1 - e^{-<X, phi>})."""
    domains = domains or [ps.domain]
    k = len(domains) - 1
    collectors = [[] for _ in domains]
    collectors[k] = [phi]

    def w(acc):
        return -np.expm1(-acc[k][0])
    samples, aborts = _batched(ps, x, domains, collectors, replicas, seed,
                               weight_fn=w)
    return _result(samples, ps.gamma(), seed, aborts)


def estimate_moment(ps, x, fns, replicas, seed=0, phi=None, domains=None):
    """Estimate N_x(e^{-<X,phi>} prod_i <X, fns[i]>) on the last domain."""
    domains = domains or [ps.domain]
    k = len(domains) - 1
    fn_list = list(fns) + ([phi] if phi is not None else [])
    collectors = [[] for _ in domains]
    collectors[k] = fn_list

    def w(acc):
        out = np.ones(acc[k].shape[1])
        for i in range(len(fns)):
            out = out * acc[k][i]
        if phi is not None:
            out = out * np.exp(-acc[k][len(fns)])
        return out
    samples, aborts = _batched(ps, x, domains, collectors, replicas, seed,
                               weight_fn=w)
    return _result(samples, ps.gamma(), seed, aborts)


def estimate_exp_moment(ps, x, lam, replicas, seed=0):
    """Estimate N_x(exp(lam <X^D, 1>) - 1)."""
    one = lambda z: np.ones(len(np.atleast_2d(z)))
    collectors = [[one]]

    def w(acc):
        return np.expm1(lam * acc[0][0])
    samples, aborts = _batched(ps, x, [ps.domain], collectors, replicas, seed,
                               weight_fn=w)
    return _result(samples, ps.gamma(), seed, aborts)


def estimate_weighted_laplace(ps, x, phi, weight_fns, combine, replicas,
                              seed=0, domains=None):
    """General estimator: combine(acc rows, replica axis) under N_x.

    weight_fns: list of boundary functions accumulated on the last
    domain; combine receives the (n_fn, n_rep) array (inner products
    <X^k, f_j> per replica) and returns per-replica values.
    """
    domains = domains or [ps.domain]
    k = len(domains) - 1
    collectors = [[] for _ in domains]
    collectors[k] = list(weight_fns)
    samples, aborts = _batched(ps, x, domains, collectors, replicas, seed,
                               weight_fn=lambda acc: combine(acc[k]))
    return _result(samples, ps.gamma(), seed, aborts)


def estimate_palm_lhs(ps, x, v_list, replicas, seed=0, phi=None,
                      domains=None):
    """N_x(e^{-<X,phi>} prod <X, v_i>) by excursion sampling."""
    return estimate_moment(ps, x, v_list, replicas, seed=seed, phi=phi,
                           domains=domains)


def estimate_palm_rhs(domain, mech, x, v_list, replicas, seed=0,
                      phi_boundary=None, dt=None):
    """The Brownian-path side of the moment recursion.

    Sample xi to its exit time and accumulate, over partitions beta of
    {1..n} with |beta| >= 2,

        int_0^tau W_t b(|beta|, u) prod_{A in beta} (inner moment field) dt

    with W_t = exp(-int psi'(u(xi_s)) ds) and u the semilinear solution
    with boundary phi.  Singleton blocks use the first-moment field;
    pair blocks recurse one level through a linearized solve.  n <= 3.
    """
    from .field import (FieldFunction, solve_semilinear, solve_linearized,
                        _psi_table)
    n = len(v_list)
    if n not in (2, 3):
        raise ValueError("n must be 2 or 3")
    zero = lambda z: np.zeros(len(np.atleast_2d(z)))
    if phi_boundary is None:
        u = FieldFunction(domain, np.zeros(domain.shape), boundary=zero)
    else:
        u = solve_semilinear(domain, mech, phi_boundary)
    m = [solve_linearized(domain, mech, u, 0.0, v) for v in v_list]
    u_int = np.maximum(u.interior_values(), 0.0)
    u_max = float(u_int.max()) if u_int.size else 0.0
    # vectorized b(j, u) and psi'(u) over the realized u range
    if mech.levy.is_empty:
        b2 = np.full_like(u_int, 2.0 * mech.a2)
        b3 = np.zeros_like(u_int)
    else:
        grid = np.linspace(0.0, u_max + 1e-9, 60)
        b2 = np.interp(u_int, grid, [mech.b_coeff(2, g) for g in grid])
        b3 = np.interp(u_int, grid, [mech.b_coeff(3, g) for g in grid])
    if phi_boundary is None:
        weight = None if mech.a1 == 0 else FieldFunction.from_interior(
            domain, np.full(domain.n_interior, mech.a1), zero)
    else:
        tab = _psi_table(mech, max(u_max, 1e-3) * 1.5 + 1.0)
        weight = FieldFunction.from_interior(domain, tab.dpsi(u_int), zero)
    mi = [f.interior_values() for f in m]
    if n == 2:
        integ = b2 * mi[0] * mi[1]
    else:
        integ = b3 * mi[0] * mi[1] * mi[2]
        for (j, k, l) in ((0, 1, 2), (0, 2, 1), (1, 2, 0)):
            w = solve_linearized(domain, mech, u, b2 * mi[j] * mi[k], zero)
            integ = integ + b2 * w.interior_values() * mi[l]
    f_int = FieldFunction.from_interior(domain, integ, zero)
    return brownian_path_integral(domain, x, [f_int], weight, replicas,
                                  seed=seed, dt=dt)[0]


# -- Brownian-path estimators (the Palm right-hand side) ------------------

def brownian_path_integral(domain, x, integrand_fields, weight_field,
                           replicas, seed=0, dt=None, batch=2000):
    """E_x of int_0^tau W_t * f(xi_t) dt for each f in integrand_fields,
    with W_t = exp(-int_0^t weight(xi_s) ds) (weight_field may be None).

    Returns list of EstimatorResult.
    """
    d = domain.d
    dt = dt or domain.h ** 2 / 4.0
    sdt = math.sqrt(dt)
    ss = np.random.SeedSequence(seed)
    sums = [[] for _ in integrand_fields]
    done = 0
    while done < replicas:
        b = min(batch, replicas - done)
        rng = np.random.default_rng(ss.spawn(1)[0])
        pos = np.repeat(np.asarray(x, float)[None, :], b, axis=0)
        alive = np.arange(b)
        logw = np.zeros(b)
        accs = [np.zeros(b) for _ in integrand_fields]
        while len(alive):
            cur = pos[alive]
            if weight_field is not None:
                logw[alive] -= np.asarray(weight_field(cur), float) * dt
            wgt = np.exp(logw[alive])
            for j, f in enumerate(integrand_fields):
                accs[j][alive] += wgt * np.asarray(f(cur), float) * dt
            step = rng.standard_normal((len(alive), d)) * sdt
            nxt = cur + step
            inside = domain.contains(nxt)
            pos[alive] = nxt
            alive = alive[inside]
        for j in range(len(integrand_fields)):
            sums[j].append(accs[j])
        done += b
    out = []
    for j in range(len(integrand_fields)):
        s = np.concatenate(sums[j])
        out.append(EstimatorResult(float(s.mean()),
                                   float(s.std(ddof=1) / math.sqrt(len(s))),
                                   len(s), seed=seed))
    return out
