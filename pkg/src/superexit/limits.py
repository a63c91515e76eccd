"""Small-target limits: the limiting kernels and martingale, the
partition-law backbone they induce, the blowup scan for the stable
approach, the one-sided supermartingale check, and the boundary-data
family whose rescaled solutions interpolate between trunk laws.

Kernel recursion: K^{i} is the Martin kernel toward z_i; for |A| >= 2

    K^A = sum over partitions sigma of A with |sigma| >= 2 of
          b(|sigma|, 0) * U(prod_{C in sigma} K^C),

equivalently the ordered-tuple sum with the 1/j! absorbed by the j!
orderings of each partition.
"""

import math
from dataclasses import dataclass, field as dfield

import numpy as np
from scipy import interpolate

from . import combinatorics as C
from .field import (FieldFunction, HarmonicKit, potential_U,
                    harmonic_extension, solve_semilinear, solve_linearized)
from .mechanism import (BranchingMechanism, Stable, TemperedStable,
                        stable_cbeta)
from .superprocess import ParticleSystem, EstimatorResult, ExitMeasure, \
    _batched, _result


# -- limiting kernels ------------------------------------------------------

@dataclass
class LimitKernelSet:
    domain: object
    mech: object
    x: np.ndarray
    z_list: list
    K: dict          # mask -> FieldFunction
    n: int

    @property
    def N(self):
        return C.full_mask(self.n)


def _martin_dense(kit, z, floor):
    """Martin kernel values on the grid with the pole distance floored
    at half a cell (the grid cannot resolve below that anyway; cf. the
    |K| <= C |y-z|^{-d} dist bound used to cap singular cells)."""
    dom = kit.domain
    d, R, c = dom.d, dom.radius, dom.center
    pts = dom.points - c
    zz = np.asarray(z, float) - c
    dist = np.maximum(np.linalg.norm(pts - zz, axis=1), floor)
    ny2 = np.sum(pts ** 2, axis=1)
    num = np.maximum(R ** 2 - ny2, 0.0) / dist ** d
    xx = kit.x - c
    dx = max(np.linalg.norm(xx - zz), floor)
    den = (R ** 2 - np.sum(xx ** 2)) / dx ** d
    return num / den


def build_limit_kernels(domain, mech, x, z_list, delta0=0.05):
    """The kernel family for conditioning on exit at z_1..z_n."""
    n = len(z_list)
    if n > 3:
        raise ValueError("n <= 3 supported")
    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(np.asarray(z_list[i]) - np.asarray(z_list[j])) \
                    <= delta0:
                raise ValueError("boundary points too close")
    if isinstance(mech.levy, Stable):
        raise ValueError(
            "psi^(j)(0) diverges for a pure stable jump measure; "
            "use blowup_scan with tempered approximants instead")
    kit = HarmonicKit(domain, x)
    floor = domain.h / 2.0
    K = {}
    for i in range(n):
        K[1 << i] = FieldFunction(domain, _martin_dense(kit, z_list[i],
                                                        floor))
    full = C.full_mask(n)
    masks = sorted(C.nonempty_submasks(full), key=C.popcount)
    for A in masks:
        if C.popcount(A) < 2:
            continue
        src = np.zeros(domain.shape)
        for sigma in C.enumerate_partitions(A):
            if len(sigma) < 2:
                continue
            term = mech.b_coeff(len(sigma), 0.0)
            prod = np.ones(domain.shape)
            for blk in sigma:
                prod = prod * K[blk].dense
            src = src + term * prod
        KA = potential_U(domain, FieldFunction(domain, src))
        if not np.all(np.isfinite(KA.dense)):
            raise ArithmeticError("kernel recursion produced non-finite "
                                  "values")
        K[A] = KA
    return LimitKernelSet(domain, mech, np.asarray(x, float), list(z_list),
                          K, n)


def limiting_martingale_eval(ks, xm):
    """Partition sum over P(N) of products of <X^k, K^C> (no factorial)."""
    inner = {A: xm.integrate(ks.K[A]) for A in ks.K}
    return C.partition_sum(ks.N, inner, coeff=None)


# -- limiting backbone -----------------------------------------------------

@dataclass
class LimitNode:
    position: np.ndarray
    tag: int
    mass: float = 0.0
    children: list = dfield(default_factory=list)
    kind: str = "branch"   # branch | leaf_exit | root


class LimitingBackboneSimulator:
    """The u=0 backbone: the root is a K^N-transform; at death a
    partition of its tag is drawn; singleton tags run Martin-kernel
    transforms to the boundary; immigrated mass is unconditioned."""

    def __init__(self, ks, mech, sim_domain=None, K=100, r_min=0.01):
        self.ks = ks
        self.mech = mech
        self.dom = sim_domain or ks.domain
        self.K = K
        self.dt = self.dom.h ** 2 / 4.0
        self.mass_ps = ParticleSystem(mech, self.dom, K=K, dt=self.dt,
                                      r_min=r_min)
        floor = 1e-12
        self._glog = {}
        self._kappa = {}
        for A, f in ks.K.items():
            logv = np.log(np.maximum(f.dense, floor))
            g = np.gradient(logv, ks.domain.h)
            self._glog[A] = [FieldFunction(ks.domain, gi) for gi in g]
            if C.popcount(A) >= 2:
                V = np.zeros(ks.domain.shape)
                for sigma in C.enumerate_partitions(A):
                    if len(sigma) < 2:
                        continue
                    prod = np.ones(ks.domain.shape)
                    for blk in sigma:
                        prod = prod * ks.K[blk].dense
                    V = V + mech.b_coeff(len(sigma), 0.0) * prod
                self._kappa[A] = FieldFunction(
                    ks.domain, np.maximum(V / np.maximum(f.dense, floor),
                                          0.0))
        lv = mech.levy
        self._imm_rate = 0.0
        self._imm_sampler = None
        self._imm_small = 0.0
        if not lv.is_empty:
            rate, sampler, comp = mech.jump_immigration(0.0, r_min)
            self._imm_rate, self._imm_sampler = rate, sampler
            self._imm_small = comp
        self.drift_mass_rate = 2.0 * mech.a2

    def sample_partition(self, A, y, rng):
        parts, w = [], []
        y2 = np.atleast_2d(y)
        vals = {Cm: max(float(self.ks.K[Cm](y2)[0]), 0.0)
                for Cm in C.nonempty_submasks(A)}
        for sigma in C.enumerate_partitions(A):
            if len(sigma) < 2:
                continue
            term = self.mech.b_coeff(len(sigma), 0.0)
            for blk in sigma:
                term *= vals[blk]
            parts.append(sigma)
            w.append(term)
        w = np.maximum(np.array(w), 0.0)
        if w.sum() <= 0:
            raise RuntimeError("degenerate partition law at %r" % (y,))
        return parts[int(rng.choice(len(parts), p=w / w.sum()))]

    def run_tree(self, y, rng, max_steps=10 ** 6):
        """One tree inside self.dom; returns (root, immigration, leaves)
        with immigration as (position, particle count) pairs and leaves
        as (exit point, tag) pairs."""
        dt = self.dt
        sdt = math.sqrt(dt)
        K = self.K
        dom = self.dom
        root = LimitNode(np.asarray(y, float), self.ks.N, kind="root")
        active = [(np.array(y, float), self.ks.N, root)]
        same = dom is self.ks.domain or (
            dom.kind == self.ks.domain.kind
            and np.allclose(dom.bounds, self.ks.domain.bounds))
        snap = 2.0 * self.ks.domain.h if same else 0.0
        poles = {1 << i: np.asarray(self.ks.z_list[i], float)
                 for i in range(self.ks.n)}
        imm, leaves = [], []
        drift_mass = (self.drift_mass_rate + self._imm_small) * dt * K
        steps = 0
        while active and steps < max_steps:
            steps += 1
            nxt_active = []
            for pos, tag, node in active:
                if drift_mass > 0:
                    npk = rng.poisson(drift_mass)
                    if npk:
                        imm.append((pos.copy(), npk))
                if self._imm_rate > 0 and rng.random() < self._imm_rate * dt:
                    r = float(self._imm_sampler(rng, 1)[0])
                    kpt = rng.poisson(r * K)
                    if kpt:
                        imm.append((pos.copy(), kpt))
                g = np.array([f(pos[None])[0] for f in self._glog[tag]])
                nrm = np.linalg.norm(g)
                cap = 2.0 / (sdt * math.sqrt(len(g)))
                if nrm > cap:
                    g *= cap / nrm
                new = pos + g * dt + rng.standard_normal(len(pos)) * sdt
                if snap > 0 and C.popcount(tag) == 1 \
                        and np.linalg.norm(new - poles[tag]) < snap:
                    z = poles[tag].copy()
                    node.children.append(LimitNode(z, tag, kind="leaf_exit"))
                    leaves.append((z, tag))
                    continue
                if not dom.contains(new[None])[0]:
                    z = dom.crossing_point(pos[None], new[None])[0]
                    node.children.append(LimitNode(z, tag, kind="leaf_exit"))
                    leaves.append((z, tag))
                    continue
                if C.popcount(tag) >= 2:
                    kap = float(self._kappa[tag](new[None])[0])
                    if rng.random() < min(kap * dt, 1.0):
                        sigma = self.sample_partition(tag, new, rng)
                        j = len(sigma)
                        mass = float(self.mech.sample_node_mass(j, 0.0, rng))
                        bn = LimitNode(new.copy(), tag, mass=mass)
                        node.children.append(bn)
                        if mass > 0:
                            kpt = rng.poisson(mass * K)
                            if kpt:
                                imm.append((new.copy(), kpt))
                        for blk in sigma:
                            cn = LimitNode(new.copy(), blk)
                            bn.children.append(cn)
                            nxt_active.append((new.copy(), blk, cn))
                        continue
                nxt_active.append((new, tag, node))
            active = nxt_active
        return root, imm, leaves


    def run_batch_immigration(self, y, b, rng, max_steps=10 ** 6,
                              pole_snap=None):
        """Vectorized: b trees at once; immigration events and leaf
        exit records (positions, tags, replica ids).

        pole_snap is the capture radius around each z_i: a singleton
        particle entering it is recorded as a leaf at z_i (the grid
        cannot resolve the Martin funnel below a few cells, and the
        conditioned path ends at z_i almost surely).  Defaults to two
        cells when simulating in the kernel domain itself.
        """
        dt = self.dt
        sdt = math.sqrt(dt)
        K = self.K
        dom = self.dom
        d = dom.d
        if pole_snap is None:
            same = dom is self.ks.domain or (
                dom.kind == self.ks.domain.kind
                and np.allclose(dom.bounds, self.ks.domain.bounds))
            pole_snap = 2.0 * self.ks.domain.h if same else 0.0
        poles = {1 << i: np.asarray(self.ks.z_list[i], float)
                 for i in range(self.ks.n)}
        pos = np.repeat(np.asarray(y, float)[None, :], b, axis=0)
        tag = np.full(b, self.ks.N, dtype=np.int64)
        rep = np.arange(b, dtype=np.int64)
        imm_pos, imm_cnt, imm_rep = [], [], []
        leaf_pos, leaf_tag, leaf_rep = [], [], []
        drift_mass_rate = (self.drift_mass_rate + self._imm_small) * K
        jump_rate = self._imm_rate
        cap = 2.0 / (sdt * math.sqrt(d))
        steps = 0
        while len(pos) and steps < max_steps:
            steps += 1
            dts = np.full(len(pos), dt)
            sdts = np.full(len(pos), sdt)
            if drift_mass_rate > 0:
                npk = rng.poisson(drift_mass_rate * dts)
                nz = npk > 0
                if np.any(nz):
                    imm_pos.append(pos[nz].copy())
                    imm_cnt.append(npk[nz])
                    imm_rep.append(rep[nz])
            if jump_rate > 0:
                trig = rng.random(len(pos)) < jump_rate * dts
                if np.any(trig):
                    tid = np.nonzero(trig)[0]
                    r = np.asarray(self._imm_sampler(rng, len(tid)), float)
                    kpt = rng.poisson(r * K)
                    nz = kpt > 0
                    if np.any(nz):
                        imm_pos.append(pos[tid[nz]].copy())
                        imm_cnt.append(kpt[nz])
                        imm_rep.append(rep[tid[nz]])
            drift = np.zeros_like(pos)
            kap = np.zeros(len(pos))
            caps = np.full(len(pos), cap)
            for T in np.unique(tag):
                sel = tag == T
                g = np.stack([f(pos[sel]) for f in self._glog[T]], axis=1)
                nrm = np.linalg.norm(g, axis=1)
                over = nrm > caps[sel]
                if np.any(over):
                    idx = np.nonzero(sel)[0][over]
                    g[over] *= (caps[idx] / nrm[over])[:, None]
                drift[sel] = g
                if C.popcount(int(T)) >= 2:
                    kap[sel] = self._kappa[T](pos[sel])
            nxt = (pos + drift * dts[:, None]
                   + rng.standard_normal(pos.shape) * sdts[:, None])
            out = ~dom.contains(nxt)
            if np.any(out):
                cross = dom.crossing_point(pos[out], nxt[out])
                leaf_pos.append(cross)
                leaf_tag.append(tag[out])
                leaf_rep.append(rep[out])
                keep = ~out
                pos, nxt = pos[keep], nxt[keep]
                tag, rep = tag[keep], rep[keep]
                kap, dts = kap[keep], dts[keep]
                if not len(pos):
                    break
            if pole_snap > 0:
                snapped = np.zeros(len(pos), dtype=bool)
                for T, z in poles.items():
                    sel = tag == T
                    if np.any(sel):
                        close = np.linalg.norm(nxt[sel] - z, axis=1) \
                            < pole_snap
                        snapped[np.nonzero(sel)[0][close]] = True
                if np.any(snapped):
                    for i in np.nonzero(snapped)[0]:
                        leaf_pos.append(poles[int(tag[i])][None].copy())
                        leaf_tag.append(tag[i:i + 1])
                        leaf_rep.append(rep[i:i + 1])
                    keep = ~snapped
                    pos, nxt = pos[keep], nxt[keep]
                    tag, rep = tag[keep], rep[keep]
                    kap, dts = kap[keep], dts[keep]
                    if not len(pos):
                        break
            dies = rng.random(len(pos)) < np.minimum(kap * dts, 1.0)
            if np.any(dies):
                new_pos, new_tag, new_rep = [], [], []
                for i in np.nonzero(dies)[0]:
                    yb = nxt[i]
                    sigma = self.sample_partition(int(tag[i]), yb, rng)
                    mass = float(self.mech.sample_node_mass(len(sigma), 0.0,
                                                            rng))
                    if mass > 0:
                        kpt = rng.poisson(mass * K)
                        if kpt:
                            imm_pos.append(yb[None].copy())
                            imm_cnt.append(np.array([kpt]))
                            imm_rep.append(rep[i:i + 1])
                    for blk in sigma:
                        new_pos.append(yb)
                        new_tag.append(blk)
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
        cat = lambda lst, shape: (np.concatenate(lst) if lst
                                  else np.zeros(shape, dtype=np.int64))
        return ((cat(imm_pos, (0, d)).reshape(-1, d), cat(imm_cnt, 0),
                 cat(imm_rep, 0)),
                (cat(leaf_pos, (0, d)).reshape(-1, d), cat(leaf_tag, 0),
                 cat(leaf_rep, 0)))


def limiting_backbone(ks, mech, x, rng, sim_domain=None, K=100):
    """One replica of the limiting construction; returns the tree root,
    the leaf list, and the exit measure of the immigrated mass."""
    sim = LimitingBackboneSimulator(ks, mech, sim_domain, K=K)
    root, imm, leaves = sim.run_tree(x, rng)
    if imm:
        starts = np.concatenate([np.repeat(p[None, :], k, axis=0)
                                 for p, k in imm])
        rep = np.zeros(len(starts), dtype=np.int64)
        stg = np.zeros(len(starts), dtype=np.int64)
        _, atoms, _ = sim.mass_ps.run_batch(starts, rep, stg, [sim.dom],
                                            rng, [[]], collect_atoms=True)
        pts = (np.concatenate([a[0] for a in atoms[0]])
               if atoms[0] else np.zeros((0, sim.dom.d)))
    else:
        pts = np.zeros((0, sim.dom.d))
    return root, leaves, ExitMeasure(pts, np.full(len(pts), 1.0 / K))


def limiting_backbone_laplace(ks, mech, x, sim_domain, phi, replicas,
                              seed=0, K=100, batch=200):
    """Mean of e^{-<Y^k, phi>} under the limiting backbone."""
    ss = np.random.SeedSequence(seed)
    sim = LimitingBackboneSimulator(ks, mech, sim_domain, K=K)
    vals = []
    done = 0
    while done < replicas:
        b = min(batch, replicas - done)
        rng = np.random.default_rng(ss.spawn(1)[0])
        (ipos, icnt, irep), _ = sim.run_batch_immigration(x, b, rng)
        row = np.zeros(b)
        if len(ipos):
            st = np.repeat(ipos, icnt, axis=0)
            rp = np.repeat(irep, icnt)
            acc, _, _ = sim.mass_ps.run_batch(
                st, rp, np.zeros(len(st), dtype=np.int64), [sim.dom],
                rng, [[phi]])
            got = acc[0][0]
            row[:len(got)] = got
        vals.append(np.exp(-row))
        done += b
    v = np.concatenate(vals)
    return EstimatorResult(float(v.mean()),
                           float(v.std(ddof=1) / math.sqrt(len(v))),
                           len(v), seed=seed)


def limiting_htransform(ks, phi, sim_domain, y, replicas, seed=0, K=100,
                        groups=40, gamma0=0.05):
    """(1/K^N(y)) N_y(e^{-<X^k, phi>} M_k^N), the excursion-measure
    transform, estimated from finite-mass runs.

    A finite-mass start (mass gamma) is a Poisson superposition of
    excursions, so with W_A = N_y(e^{-phi} M^A) and
    P_A = E[e^{-phi} M^A] / E[e^{-phi}] the cluster expansion gives

        P_A = sum over partitions rho of A of prod_{D in rho} gamma W_D,

    inverted recursively for W_N; exact in gamma, so no small-mass
    bias.  Error bars come from splitting replicas into groups."""
    ps = ParticleSystem(ks.mech, sim_domain, K=K, gamma0=gamma0)
    gamma = ps.gamma()
    masks = list(C.nonempty_submasks(ks.N))
    knx = float(ks.K[ks.N](np.atleast_2d(y))[0])
    collectors = [[phi] + [ks.K[A] for A in masks]]

    def per_group(rows):
        e = np.exp(-rows[0])
        inner = {masks[i]: rows[1 + i] for i in range(len(masks))}
        eM = {A: float(np.mean(e * C.partition_sum(A, inner, coeff=None)))
              for A in masks}
        ebar = float(np.mean(e))
        gw = {}
        for A in sorted(masks, key=C.popcount):
            val = eM[A] / ebar
            for rho in C.enumerate_partitions(A):
                if len(rho) < 2:
                    continue
                prod = 1.0
                for D in rho:
                    prod *= gw[D]
                val -= prod
            gw[A] = val
        return gw[ks.N] / (gamma * knx)

    ss = np.random.SeedSequence(seed)
    n0 = ps.initial_count()
    per = max(replicas // groups, 1)
    vals = []
    aborts = 0
    for _ in range(groups):
        rng = np.random.default_rng(ss.spawn(1)[0])
        starts = np.repeat(np.asarray(y, float)[None, :], per * n0, axis=0)
        rep = np.repeat(np.arange(per), n0)
        stg = np.zeros(per * n0, dtype=np.int64)
        acc, _, aborted = ps.run_batch(starts, rep, stg, [sim_domain], rng,
                                       collectors)
        aborts += int(aborted.sum())
        vals.append(per_group(acc[0]))
    vals = np.asarray(vals)
    return EstimatorResult(float(vals.mean()),
                           float(vals.std(ddof=1) / math.sqrt(len(vals))),
                           per * groups, seed=seed, aborts=aborts)


# -- blowup scan -----------------------------------------------------------

@dataclass
class BlowupScan:
    beta: float
    gammas: np.ndarray
    m2: np.ndarray
    m2_closed: np.ndarray
    node_median: np.ndarray
    node_mean: np.ndarray
    ratio_n3: np.ndarray
    slope_m2: float
    slope_median: float
    slope_ratio: float
    mtilde_gap: np.ndarray = None


def blowup_scan(beta, gamma_ladder, x=None, z_list=None, domain=None,
                seed=0, n_mass=20000):
    """Per-gamma quantities of the tempered approach to the stable case
    and their log-log slopes."""
    gam = np.asarray(sorted(gamma_ladder, reverse=True), float)
    if np.any(gam < 1e-4):
        raise ValueError("gamma ladder floor is 1e-4")
    m2 = np.zeros(len(gam))
    med = np.zeros(len(gam))
    mean = np.zeros(len(gam))
    ratio = np.zeros(len(gam))
    rng = np.random.default_rng(seed)
    spatial = 1.0
    if domain is not None and z_list is not None and len(z_list) >= 2:
        kit = HarmonicKit(domain, x)
        floor = domain.h / 2.0
        k1 = _martin_dense(kit, z_list[0], floor)
        k2 = _martin_dense(kit, z_list[1], floor)
        u12 = potential_U(domain, FieldFunction(domain, k1 * k2))
        probe = np.atleast_2d(np.asarray(x, float))
        f1 = FieldFunction(domain, k1 * k2)
        spatial = float(f1(probe)[0] / max(u12(probe)[0], 1e-300))
    for i, g in enumerate(gam):
        mech = BranchingMechanism(0.0, 0.0, TemperedStable(beta, g))
        m2[i] = 0.5 * mech.levy.exp_moment(2, 0.0)
        samp = mech.sample_node_mass(2, 0.0, rng, size=n_mass)
        med[i] = float(np.median(samp))
        mean[i] = float(np.mean(samp))
        b2 = mech.b_coeff(2, 0.0)
        b3 = mech.b_coeff(3, 0.0)
        # P({1},{2},{3}) / P({1,2},{3}) at the probe, up to the fixed
        # spatial factor K1 K2 / U(K1 K2)
        ratio[i] = b3 / (b2 * b2) * spatial
    m2_closed = 0.5 * math.gamma(1.0 - beta) * gam ** (beta - 1.0)
    lg = np.log(gam)
    slope_m2 = float(np.polyfit(lg, np.log(m2), 1)[0])
    slope_med = float(np.polyfit(lg, np.log(med), 1)[0])
    slope_ratio = float(np.polyfit(lg, np.log(ratio), 1)[0])
    return BlowupScan(beta, gam, m2, m2_closed, med, mean, ratio,
                      slope_m2, slope_med, slope_ratio)


# -- supermartingale gap ---------------------------------------------------

def supermartingale_gap(mech, h_field, y, domains, replicas, seed=0, K=100,
                        k_small=0, k_big=None):
    """Estimate N_y(<X^{k'}, h> - <X^k, h>) / h(y) over nested domains.

    The normalized density <X^k, h>/h(y) is a supermartingale when h is
    a potential of the limiting trunk type, and a martingale when h is
    harmonic and a1 = 0; the gap must be <= 0 up to noise either way.
    """
    if k_big is None:
        k_big = len(domains) - 1
    if k_small == k_big:
        return EstimatorResult(0.0, 0.0, replicas, seed=seed)
    hy = float(h_field(np.atleast_2d(y))[0])
    collectors = [[] for _ in domains]
    collectors[k_small] = [h_field]
    collectors[k_big] = [h_field]
    ps = ParticleSystem(mech, domains[-1], K=K)

    def w(acc):
        return (acc[k_big][0] - acc[k_small][0]) / hy
    samples, aborts = _batched(ps, y, domains, collectors, replicas, seed,
                               weight_fn=w)
    return _result(samples, ps.gamma(), seed, aborts)


def trunk_potential(domain, k1, k2, beta, theta):
    """U([K1 K2]^beta [theta K1 + (1-theta) K2]^(1-beta))."""
    prod = np.maximum(k1.dense * k2.dense, 0.0)
    mix = np.maximum(theta * k1.dense + (1.0 - theta) * k2.dense, 0.0)
    f = prod ** beta * mix ** (1.0 - beta)
    return potential_U(domain, FieldFunction(domain, f))


# -- the boundary-data family ----------------------------------------------

def _psi2_interp(mech, u_max):
    """Vectorized psi'' via a log-log table (closed form when empty)."""
    if mech.levy.is_empty:
        return lambda u: np.full(np.shape(u), 2.0 * mech.a2)
    grid = np.geomspace(max(u_max * 1e-8, 1e-12), u_max * 1.01, 60)
    vals = np.array([mech.b_coeff(2, g) for g in grid])
    pch = interpolate.PchipInterpolator(np.log(grid), np.log(vals))

    def f(u):
        u = np.asarray(u, float)
        return np.exp(pch(np.log(np.clip(u, grid[0], grid[-1]))))
    return f


@dataclass
class FamilyReport:
    ladder: list
    rel_err: np.ndarray       # per ladder index, max rel err at probes
    v_bar_probe: np.ndarray   # (ladder, probes)
    v_lim_probe: np.ndarray   # (probes,)
    probes: np.ndarray
    stable: bool


def family_lab(domain, phi_f, phi_g, phi_u, ladder, beta=None, mech=None,
               probes=None):
    """Solve the coupled system per ladder index, rescale, and compare
    with the predicted limit field.

    Stable case (beta given): psi(lam) = lam^(1+beta); the limit is
    U(u^{-(1-beta)} f g) with u, f, g the harmonic extensions.
    Analytic case (mech given): the limit is psi''(0) U(fg).
    """
    stable = beta is not None
    if stable:
        mech = BranchingMechanism(0.0, 0.0,
                                  Stable(beta, 1.0 / stable_cbeta(beta)))
    if probes is None:
        probes = np.asarray(domain.center, float)[None, :]
    probes = np.atleast_2d(probes)
    fbar = harmonic_extension(domain, phi_f)
    gbar = harmonic_extension(domain, phi_g)
    ubar = harmonic_extension(domain, phi_u)
    if stable:
        src = (np.maximum(ubar.interior_values(), 1e-300) ** (beta - 1.0)
               * fbar.interior_values() * gbar.interior_values())
        v_lim = potential_U(domain, src)
    else:
        v_lim = potential_U(domain, mech.b_coeff(2, 0.0)
                            * fbar.interior_values()
                            * gbar.interior_values())
    v_lim_probe = v_lim(probes)
    rel = np.zeros(len(ladder))
    vbp = np.zeros((len(ladder), len(probes)))
    for idx, (a, b, c) in enumerate(ladder):
        def bu(z, c=c):
            return c * np.asarray(phi_u(z), float)

        def bf(z, a=a):
            return a * np.asarray(phi_f(z), float)

        def bg(z, b=b):
            return b * np.asarray(phi_g(z), float)
        u_n = solve_semilinear(domain, mech, bu)
        zero = lambda z: np.zeros(len(np.atleast_2d(z)))
        f_n = solve_linearized(domain, mech, u_n, 0.0, bf)
        g_n = solve_linearized(domain, mech, u_n, 0.0, bg)
        if stable:
            psi2 = (beta * (1.0 + beta)
                    * np.maximum(u_n.interior_values(), 1e-300)
                    ** (beta - 1.0))
            d_n = beta * (1.0 + beta) * a * b * c ** (beta - 1.0)
        else:
            psi2 = _psi2_interp(mech, float(np.max(u_n.dense)) + 1e-12)(
                u_n.interior_values())
            d_n = a * b
        src_n = psi2 * f_n.interior_values() * g_n.interior_values()
        v_n = solve_linearized(domain, mech, u_n, src_n, zero)
        vb = v_n(probes) / d_n
        vbp[idx] = vb
        rel[idx] = float(np.max(np.abs(vb - v_lim_probe)
                                / np.maximum(np.abs(v_lim_probe), 1e-300)))
    return FamilyReport(list(ladder), rel, vbp, v_lim_probe, probes, stable)
