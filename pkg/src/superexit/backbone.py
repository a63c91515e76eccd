"""The conditioned construction: tagged branching tree of transformed
diffusions with node and branch immigration, and the martingale-density
side that it must agree with.

A ConditioningSystem holds the fields u^A (semilinear solves), the
derived v_A / v^A (subset transforms applied nodewise), the branch-law
normalizers V_A, and the drift/killing data for the transformed motions.

The two sides of the comparison:
  * htransform side: unconditioned excursion sampling weighted by the
    density  sum_A (-1)^{|A|} exp(-<X^k, u^A>), normalized by v_N(x);
  * backbone side: direct simulation -- a root particle with drift
    grad log v_N and killing V_N/v_N, branching into tagged children,
    with mass immigrated at nodes and along edges, the mass evolving as
    the reweighted superprocess; the exit measure collects only the
    immigrated mass.
"""

import math
from dataclasses import dataclass, field as dfield

import numpy as np

from . import combinatorics as C
from .field import FieldFunction, solve_semilinear, hitting_field
from .superprocess import ParticleSystem, EstimatorResult, _batched, _result


class ConditioningSystem:
    def __init__(self, domain, mech, u_fields, n):
        """u_fields: dict mask -> FieldFunction for all nonempty A."""
        self.domain = domain
        self.mech = mech
        self.n = n
        self.N = C.full_mask(n)
        self.u = dict(u_fields)
        self._derive()

    @classmethod
    def from_boundary_data(cls, domain, mech, phis):
        """phis: list of n boundary functions; u^A solves the semilinear
        problem with boundary data sum_{i in A} phi_i."""
        n = len(phis)
        u = {}
        for A in C.nonempty_submasks(C.full_mask(n)):
            idxs = [i for i in range(n) if A >> i & 1]

            def bf(z, idxs=idxs):
                z = np.atleast_2d(z)
                return sum(np.asarray(phis[i](z), float) for i in idxs)
            u[A] = solve_semilinear(domain, mech, bf)
        return cls(domain, mech, u, n)

    @classmethod
    def from_caps(cls, domain, mech, caps):
        n = len(caps)
        u = {}
        for A in C.nonempty_submasks(C.full_mask(n)):
            sub = [caps[i] for i in range(n) if A >> i & 1]
            u[A] = hitting_field(domain, mech, sub)
        return cls(domain, mech, u, n)

    def _derive(self):
        n, N = self.n, self.N
        u_dense = {A: self.u[A].dense for A in self.u}
        v_dense = C.uv_transforms(u_dense, n, "vA_from_u")
        self.v = {A: FieldFunction(self.domain, v_dense[A])
                  for A in v_dense}
        vu_dense = C.uv_transforms(u_dense, n, "vupper_from_u")
        self.v_upper = {A: FieldFunction(self.domain, vu_dense[A])
                        for A in vu_dense}
        self.u_N = self.u[N]
        self.v_N = self.v[N]
        self._tables = None
        self._vA_grid = v_dense
        self._uN_max = float(np.max(self.u_N.dense))
        inter = self.u_N.interior_values()
        self._uN_min = max(float(np.min(inter)) * 0.9, 1e-4)

    # -- branch-law machinery -------------------------------------------

    def _b_table(self, j_max):
        """Interpolants of b(j, u) over u in [0, u_max]."""
        if self._tables is not None and self._tables[0] >= j_max:
            return self._tables[1], self._tables[2]
        umax = self._uN_max * 1.05 + 1e-6
        grid = np.linspace(min(self._uN_min, umax / 2), umax, 80)
        tab = np.zeros((j_max + 1, len(grid)))
        for j in range(2, j_max + 1):
            tab[j] = [self.mech.b_coeff(j, float(g)) for g in grid]
        self._tables = (j_max, grid, tab)
        return grid, tab

    def b_of(self, j, u_val):
        grid, tab = self._b_table(max(j, self.j_max()))
        return float(np.interp(u_val, grid, tab[j]))

    def j_max(self, tol=1e-9):
        """Smallest j with negligible branch-law tail, capped at 40."""
        if getattr(self, "_jmax", None) is not None:
            return self._jmax
        if self.mech.levy.is_empty:
            self._jmax = 2
            return 2
        sig = float(sum(np.max(np.abs(v)) for v in self._vA_grid.values()))
        jm = 2
        u_lo = self._uN_min
        for j in range(3, 41):
            term = self.mech.b_coeff(j, u_lo) / math.factorial(j) * sig ** j
            jm = j
            if term < 1e-12:
                break
        self._jmax = jm
        return jm

    def cover_power_sum(self, A, j, at_pts=None):
        """S_j(A) = sum over ordered j-covers of A of prod v_{C_i},
        via inclusion-exclusion over sub-sums sigma_B = sum_{C<=B} v_C."""
        if at_pts is None:
            sig = {B: sum(self._vA_grid[Cm] for Cm in C.nonempty_submasks(B))
                   for B in C.submasks(A) if B}
            total = 0.0
            ka = C.popcount(A)
            for B in C.submasks(A):
                if B == 0:
                    continue
                total = total + (-1) ** (ka - C.popcount(B)) * sig[B] ** j
            return total
        vals = {Cm: self.v[Cm](at_pts) for Cm in C.nonempty_submasks(A)}
        ka = C.popcount(A)
        total = np.zeros(len(np.atleast_2d(at_pts)))
        for B in C.submasks(A):
            if B == 0:
                continue
            sb = sum(vals[Cm] for Cm in C.nonempty_submasks(B))
            total = total + (-1) ** (ka - C.popcount(B)) * sb ** j
        return total

    def V_field(self, A):
        """V_A on the grid: sum_j (b(j,u^N)/j!) S_j(A)."""
        jm = self.j_max()
        grid, tab = self._b_table(jm)
        uN = self.u_N.dense
        out = np.zeros_like(uN)
        for j in range(2, jm + 1):
            bj = np.interp(uN, grid, tab[j])
            out = out + bj / math.factorial(j) * self.cover_power_sum(A, j)
        return FieldFunction(self.domain, out)

    def kappa_field(self, A, floor=1e-12):
        V = self.V_field(A).dense
        v = np.maximum(self._vA_grid[A], floor)
        return FieldFunction(self.domain, np.maximum(V / v, 0.0))

    def grad_log_v(self, A, floor=1e-12):
        logv = np.log(np.maximum(self._vA_grid[A], floor))
        grads = np.gradient(logv, self.domain.h)
        if self.domain.d == 1:
            grads = [grads]
        return [FieldFunction(self.domain, g) for g in grads]

    def sample_branch(self, A, y, rng):
        """(j, tags) from the law (3.2) at site y for a parent tagged A."""
        uy = float(self.u_N(np.atleast_2d(y))[0])
        jm = self.j_max()
        y2 = np.atleast_2d(y)
        vals = {Cm: float(self.v[Cm](y2)[0])
                for Cm in C.nonempty_submasks(A)}

        def W(m, R):
            # sum over ordered m-tuples of nonempty subsets of A whose
            # union contains R, of prod v
            tot = 0.0
            for S in C.submasks(R):
                sig = sum(vals[Cm] for Cm in C.nonempty_submasks(A & ~S))
                tot += (-1) ** C.popcount(S) * sig ** m
            return tot
        weights = []
        for j in range(2, jm + 1):
            bj = self.b_of(j, uy)
            weights.append(bj / math.factorial(j) * W(j, A))
        w = np.maximum(np.array(weights), 0.0)
        if w.sum() <= 0:
            raise RuntimeError("degenerate branch law at %r" % (y,))
        j = 2 + int(rng.choice(len(w), p=w / w.sum()))
        # sequential tag sampling
        tags = []
        R = A
        for i in range(j):
            m_left = j - i - 1
            opts = list(C.nonempty_submasks(A))
            pw = []
            for Cm in opts:
                R2 = R & ~Cm
                tail = W(m_left, R2) if m_left > 0 else (1.0 if R2 == 0 else 0.0)
                pw.append(vals[Cm] * tail)
            pw = np.maximum(np.array(pw), 0.0)
            pick = opts[int(rng.choice(len(opts), p=pw / pw.sum()))]
            tags.append(pick)
            R = R & ~pick
        return j, tags


@dataclass
class BackboneNode:
    position: np.ndarray
    time: float
    tag: int
    mass: float = 0.0
    children: list = dfield(default_factory=list)
    kind: str = "branch"  # branch | leaf_exit | root


@dataclass
class BackboneTree:
    root: BackboneNode
    immigration_events: list = dfield(default_factory=list)  # (pos, mass)
    boundary_errors: int = 0

    def leaves(self):
        out = []

        def rec(node):
            if not node.children:
                out.append(node)
            for c in node.children:
                rec(c)
        rec(self.root)
        return out

    def check_tags(self):
        ok = True

        def rec(node):
            nonlocal ok
            if node.children:
                union = 0
                for c in node.children:
                    if c.tag == 0 or (c.tag & ~node.tag):
                        ok = False
                    union |= c.tag
                if union != node.tag:
                    ok = False
                for c in node.children:
                    rec(c)
        rec(self.root)
        return ok


def mkdensity_eval(cs, xm):
    """The density evaluated at one exit measure; both forms must agree."""
    inner_u = {A: xm.integrate(cs.u[A]) for A in cs.u}
    alt = 1.0  # empty-set term
    for A in C.nonempty_submasks(cs.N):
        alt += (-1) ** C.popcount(A) * math.exp(-inner_u[A])
    inner_v = {A: xm.integrate(cs.v[A]) for A in cs.v}
    part = 0.0
    # partition form: e^{-<X,u^N>} sum_m 1/m! sum_{ordered covers} prod <X,v>
    # equivalently sum over multisets: use the subset identity instead for
    # the cross-check at modest n via the exponential of sums:
    # sum_m (1/m!) sum_{covers} prod = sum over families; computed by
    # inclusion-exclusion: sum_{B <= N} (-1)^{n-|B|} exp(sigma_B)
    # with sigma_B = sum_{C <= B, C != 0} <X, v_C>
    for B in C.submasks(cs.N):
        sig = sum(inner_v[Cm] for Cm in C.nonempty_submasks(B)) if B else 0.0
        part += (-1) ** (cs.n - C.popcount(B)) * math.exp(sig)
    part *= math.exp(-inner_u[cs.N])
    return alt, part


def htransform_expectation(cs, phis, domains, x, replicas, seed=0, ps=None):
    """(1/v_N(x)) N_x(e^{-<X^k, phi>} Mdensity) by excursion sampling.

    phis may be a single boundary function or a list; one shared run of
    excursions serves every phi.  Returns one EstimatorResult per phi
    (a bare result when a single phi was given).
    """
    single = callable(phis)
    phis = [phis] if single else list(phis)
    ps = ps or ParticleSystem(cs.mech, cs.domain)
    k = len(domains) - 1
    masks = list(C.nonempty_submasks(cs.N))
    np_ = len(phis)
    signs = np.array([(-1) ** C.popcount(A) for A in masks])
    vnx = float(cs.v_N(np.atleast_2d(x))[0])
    collectors = [[] for _ in domains]
    collectors[k] = phis + [cs.u[A] for A in masks]
    ss = np.random.SeedSequence(seed)
    n0 = ps.initial_count()
    samples = [[] for _ in phis]
    aborts = 0
    done = 0
    while done < replicas:
        b = min(4000, replicas - done)
        rng = np.random.default_rng(ss.spawn(1)[0])
        starts = np.repeat(np.asarray(x, float)[None, :], b * n0, axis=0)
        rep = np.repeat(np.arange(b), n0)
        stg = np.zeros(b * n0, dtype=np.int64)
        acc, _, aborted = ps.run_batch(starts, rep, stg, domains, rng,
                                       collectors)
        rows = acc[k]
        dens = np.ones(rows.shape[1])
        for i in range(len(masks)):
            dens = dens + signs[i] * np.exp(-rows[np_ + i])
        ok = ~aborted
        for j in range(np_):
            samples[j].append((np.exp(-rows[j]) * dens / vnx)[ok])
        aborts += int(aborted.sum())
        done += b
    out = [_result(np.concatenate(s), ps.gamma(), seed, aborts)
           for s in samples]
    return out[0] if single else out


class BackboneSimulator:
    """Simulates the tagged tree and its immigrated mass inside the
    innermost comparison domain."""

    def __init__(self, cs, sim_domain, K=100, dt=None, r_min=0.01):
        self.cs = cs
        self.dom = sim_domain
        self.K = K
        self.dt = float(dt) if dt is not None else sim_domain.h ** 2 / 4.0
        # mass engine: base mechanism reweighted spatially by u^N
        self.mass_ps = ParticleSystem(cs.mech, sim_domain, K=K, dt=self.dt,
                                      r_min=r_min, u_field=cs.u_N)
        self._glog = {A: cs.grad_log_v(A) for A in cs.v}
        self._kappa = {A: cs.kappa_field(A) for A in cs.v}
        # branch-immigration jump data per reweighting level via thinning
        lv = cs.mech.levy
        self._imm_rate0 = 0.0
        self._imm_sampler = None
        self._imm_small = 0.0
        if not lv.is_empty:
            rate, sampler, comp = cs.mech.jump_immigration(0.0, r_min)
            # jump intensity r pi(dr) truncated at r_min; spatial tilt
            # e^{-r u^N(y)} applied by thinning
            self._imm_rate0 = rate
            self._imm_sampler = sampler
            self._imm_small = comp  # compensated small-jump mass rate at u=0
        self.drift_mass_rate = 2.0 * cs.mech.a2

    def run_tree(self, x, rng, max_steps=10 ** 6):
        """One backbone tree; returns (tree, immigration list).

        immigration list holds (position, mass) for node immigration and
        Poisson-rounded packets for continuous immigration.
        """
        cs = self.cs
        dom = self.dom
        dt = self.dt
        sdt = math.sqrt(dt)
        K = self.K
        root = BackboneNode(np.asarray(x, float), 0.0, cs.N, kind="root")
        tree = BackboneTree(root)
        imm = []
        # active particles: (pos, tag, node_ref, time)
        active = [(np.array(x, float), cs.N, root, 0.0)]
        steps = 0
        while active and steps < max_steps:
            steps += 1
            new_active = []
            for pos, tag, node, t in active:
                p2 = pos[None, :]
                drift = np.array([g(p2)[0] for g in self._glog[tag]])
                # cap the drift so one step cannot jump across cells
                nrm = np.linalg.norm(drift)
                cap = 2.0 / (sdt * math.sqrt(len(drift)))
                if nrm > cap:
                    drift = drift * (cap / nrm)
                nxt = pos + drift * dt + rng.standard_normal(len(pos)) * sdt
                # continuous immigration along the edge
                u_here = float(cs.u_N(p2)[0])
                drift_mass = (self.drift_mass_rate + self._imm_small) * dt
                n_pkt = rng.poisson(drift_mass * K)
                if n_pkt:
                    imm.append((pos.copy(), n_pkt))
                if self._imm_rate0 > 0:
                    nj = rng.poisson(self._imm_rate0 * dt)
                    for _ in range(nj):
                        r = float(self._imm_sampler(rng, 1)[0])
                        if rng.random() < math.exp(-r * u_here):
                            kpt = rng.poisson(r * K)
                            if kpt:
                                imm.append((pos.copy(), kpt))
                if not dom.contains(nxt[None])[0]:
                    z = dom.crossing_point(pos[None], nxt[None])[0]
                    node.children.append(
                        BackboneNode(z, t + dt, tag, kind="leaf_exit"))
                    continue
                kap = float(self._kappa[tag](nxt[None])[0])
                if rng.random() < min(kap * dt, 1.0):
                    j, tags = cs.sample_branch(tag, nxt, rng)
                    u_here2 = float(cs.u_N(nxt[None])[0])
                    mass = float(cs.mech.sample_node_mass(j, u_here2, rng))
                    bnode = BackboneNode(nxt.copy(), t + dt, tag, mass=mass)
                    node.children.append(bnode)
                    if mass > 0:
                        kpt = rng.poisson(mass * K)
                        if kpt:
                            imm.append((nxt.copy(), kpt))
                    for tg in tags:
                        cnode = BackboneNode(nxt.copy(), t + dt, tg,
                                             kind="branch")
                        bnode.children.append(cnode)
                        new_active.append((nxt.copy(), tg, cnode, t + dt))
                    continue
                new_active.append((nxt, tag, node, t + dt))
            active = new_active
        tree.immigration_events = imm
        return tree, imm

    def run_batch_immigration(self, x, b, rng, max_steps=10 ** 6):
        """Vectorized: b backbone trees at once; returns the immigration
        events as (positions, particle counts, replica ids) plus the
        number of leaf exits per replica."""
        cs = self.cs
        dom = self.dom
        dt = self.dt
        sdt = math.sqrt(dt)
        K = self.K
        d = dom.d
        pos = np.repeat(np.asarray(x, float)[None, :], b, axis=0)
        tag = np.full(b, cs.N, dtype=np.int64)
        rep = np.arange(b, dtype=np.int64)
        leaf_exits = np.zeros(b, dtype=np.int64)
        imm_pos, imm_cnt, imm_rep = [], [], []
        drift_mass = (self.drift_mass_rate + self._imm_small) * dt * K
        p_jump = self._imm_rate0 * dt
        cap = 2.0 / (sdt * math.sqrt(d))
        steps = 0
        while len(pos) and steps < max_steps:
            steps += 1
            # continuous immigration along all active edges
            if drift_mass > 0:
                n_pkt = rng.poisson(drift_mass, len(pos))
                nz = n_pkt > 0
                if np.any(nz):
                    imm_pos.append(pos[nz].copy())
                    imm_cnt.append(n_pkt[nz])
                    imm_rep.append(rep[nz])
            if p_jump > 0:
                trig = rng.random(len(pos)) < p_jump
                if np.any(trig):
                    tid = np.nonzero(trig)[0]
                    r = np.asarray(self._imm_sampler(rng, len(tid)), float)
                    u_here = np.maximum(cs.u_N(pos[tid]), 0.0)
                    acc = rng.random(len(tid)) < np.exp(-r * u_here)
                    tid, r = tid[acc], r[acc]
                    if len(tid):
                        kpt = rng.poisson(r * K)
                        nz = kpt > 0
                        if np.any(nz):
                            imm_pos.append(pos[tid[nz]].copy())
                            imm_cnt.append(kpt[nz])
                            imm_rep.append(rep[tid[nz]])
            # drift step, grouped by tag
            drift = np.zeros_like(pos)
            kap = np.zeros(len(pos))
            for T in np.unique(tag):
                sel = tag == T
                g = np.stack([f(pos[sel]) for f in self._glog[T]], axis=1)
                nrm = np.linalg.norm(g, axis=1)
                over = nrm > cap
                if np.any(over):
                    g[over] *= (cap / nrm[over])[:, None]
                drift[sel] = g
                kap[sel] = self._kappa[T](pos[sel])
            nxt = pos + drift * dt + rng.standard_normal(pos.shape) * sdt
            # exits
            out = ~dom.contains(nxt)
            if np.any(out):
                np.add.at(leaf_exits, rep[out], 1)
                keep = ~out
                pos, nxt = pos[keep], nxt[keep]
                tag, rep, kap = tag[keep], rep[keep], kap[keep]
                if not len(pos):
                    break
            # deaths -> branch points
            dies = rng.random(len(pos)) < np.minimum(kap * dt, 1.0)
            if np.any(dies):
                new_pos, new_tag, new_rep = [], [], []
                for i in np.nonzero(dies)[0]:
                    y = nxt[i]
                    j, tags = cs.sample_branch(tag[i], y, rng)
                    u_y = max(float(cs.u_N(y[None])[0]), 0.0)
                    mass = float(cs.mech.sample_node_mass(j, u_y, rng))
                    if mass > 0:
                        kpt = rng.poisson(mass * K)
                        if kpt:
                            imm_pos.append(y[None].copy())
                            imm_cnt.append(np.array([kpt]))
                            imm_rep.append(rep[i:i + 1])
                    for tg in tags:
                        new_pos.append(y)
                        new_tag.append(tg)
                        new_rep.append(rep[i])
                keep = ~dies
                pos = np.concatenate([nxt[keep], np.array(new_pos)]) \
                    if new_pos else nxt[keep]
                tag = np.concatenate([tag[keep],
                                      np.array(new_tag, dtype=np.int64)]) \
                    if new_tag else tag[keep]
                rep = np.concatenate([rep[keep],
                                      np.array(new_rep, dtype=np.int64)]) \
                    if new_rep else rep[keep]
            else:
                pos = nxt
        if imm_pos:
            return (np.concatenate(imm_pos), np.concatenate(imm_cnt),
                    np.concatenate(imm_rep), leaf_exits)
        return (np.zeros((0, d)), np.zeros(0, dtype=np.int64),
                np.zeros(0, dtype=np.int64), leaf_exits)


def simulate_backbone(cs, sim_domain, x, rng, K=100):
    """One replica: tree plus the exit measure of all immigrated mass."""
    from .superprocess import ExitMeasure
    sim = BackboneSimulator(cs, sim_domain, K=K)
    tree, imm = sim.run_tree(x, rng)
    if imm:
        starts = np.concatenate([np.repeat(p[None, :], k, axis=0)
                                 for p, k in imm])
        rep = np.zeros(len(starts), dtype=np.int64)
        stg = np.zeros(len(starts), dtype=np.int64)
        _, atoms, _ = sim.mass_ps.run_batch(
            starts, rep, stg, [sim_domain], rng, [[]], collect_atoms=True)
        pts = (np.concatenate([a[0] for a in atoms[0]])
               if atoms[0] else np.zeros((0, sim_domain.d)))
    else:
        pts = np.zeros((0, sim_domain.d))
    xm = ExitMeasure(pts, np.full(len(pts), 1.0 / K))
    return tree, xm


def backbone_laplace(cs, sim_domain, x, phis, replicas, seed=0, K=100,
                     batch=500):
    """Mean of e^{-<Y^k, phi>} over backbone replicas, for each phi."""
    single = callable(phis)
    phis = [phis] if single else list(phis)
    ss = np.random.SeedSequence(seed)
    sim = BackboneSimulator(cs, sim_domain, K=K)
    vals = [[] for _ in phis]
    done = 0
    while done < replicas:
        b = min(batch, replicas - done)
        rng = np.random.default_rng(ss.spawn(1)[0])
        ipos, icnt, irep, _ = sim.run_batch_immigration(x, b, rng)
        rows = np.zeros((len(phis), b))
        if len(ipos):
            st = np.repeat(ipos, icnt, axis=0)
            rp = np.repeat(irep, icnt)
            acc, _, _ = sim.mass_ps.run_batch(
                st, rp, np.zeros(len(st), dtype=np.int64),
                [sim_domain], rng, [phis])
            got = acc[0]
            rows[:, :got.shape[1]] = got
        for j in range(len(phis)):
            vals[j].append(np.exp(-rows[j]))
        done += b
    out = []
    for j in range(len(phis)):
        v = np.concatenate(vals[j])
        out.append(EstimatorResult(float(v.mean()),
                                   float(v.std(ddof=1) / math.sqrt(len(v))),
                                   len(v), seed=seed))
    return out[0] if single else out


def two_sided_compare(cs, domains, x, phis, replicas_lhs, replicas_rhs,
                      seed=0, K=100):
    """Two-sided comparison: h-transform expectation vs backbone Laplace.

    domains: nested list ending at the comparison domain D_k (must be
    strictly inside the conditioning domain).  phis may be one boundary
    function or a list; simulations are shared across the list.
    Returns (lhs, rhs, z) or per-phi lists.
    """
    single = callable(phis)
    lhs = htransform_expectation(cs, phis, domains, x, replicas_lhs,
                                 seed=seed,
                                 ps=ParticleSystem(cs.mech, cs.domain, K=K))
    rhs = backbone_laplace(cs, domains[-1], x, phis, replicas_rhs,
                           seed=seed + 1, K=K)
    if single:
        return lhs, rhs, lhs.z_against(rhs)
    return lhs, rhs, [l.z_against(r) for l, r in zip(lhs, rhs)]
