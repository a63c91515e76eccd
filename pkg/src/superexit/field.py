"""Domain geometry, ball potential theory, and grid PDE solvers.

Everything is normalized for the generator (1/2)Laplacian: the Green
function satisfies (1/2) Delta G(., w) = -delta_w, the potential operator
U solves (1/2) Delta (Uf) = -f with zero boundary data, and U1 equals the
mean exit time of standard Brownian motion ((R^2 - |y|^2)/d on a ball).

Grids are uniform Cartesian; balls get Shortley-Weller cut cells at the
boundary (first order there, second order inside).
"""

import math

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import (spsolve, factorized, spilu, lgmres,
                                 LinearOperator)


def sphere_area(d, R=1.0):
    """Surface area of the (d-1)-sphere of radius R in R^d."""
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0) * R ** (d - 1)


class Domain:
    """Ball or axis-aligned box with a uniform grid."""

    def __init__(self, kind, d, center=None, radius=None, bounds=None, n=None):
        self.kind = kind
        self.d = d
        if kind == "ball":
            self.center = np.zeros(d) if center is None else np.asarray(center, float)
            self.radius = float(radius)
            self.bounds = np.stack([self.center - self.radius,
                                    self.center + self.radius], axis=1)
        elif kind == "box":
            self.bounds = np.asarray(bounds, float)
            self.center = self.bounds.mean(axis=1)
        else:
            raise ValueError("kind must be ball or box")
        if n is None:
            n = {2: 129, 3: 65, 4: 33}.get(d, 33)
        self.n = int(n)
        self.axes = [np.linspace(self.bounds[i, 0], self.bounds[i, 1], self.n)
                     for i in range(d)]
        self.h = float(self.axes[0][1] - self.axes[0][0])
        self._build_grid()

    @classmethod
    def ball(cls, d, radius=1.0, center=None, n=None):
        return cls("ball", d, center=center, radius=radius, n=n)

    @classmethod
    def box(cls, d, halfwidth=0.5, center=None, n=None):
        c = np.zeros(d) if center is None else np.asarray(center, float)
        bounds = np.stack([c - halfwidth, c + halfwidth], axis=1)
        return cls("box", d, bounds=bounds, n=n)

    def shrink(self, s):
        """Concentric copy scaled by s in (0, 1]."""
        if self.kind == "ball":
            return Domain.ball(self.d, self.radius * s, self.center, self.n)
        hw = (self.bounds[:, 1] - self.bounds[:, 0]) / 2.0 * s
        bounds = np.stack([self.center - hw, self.center + hw], axis=1)
        return Domain("box", self.d, bounds=bounds, n=self.n)

    def _build_grid(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        self.points = np.stack([m.ravel() for m in mesh], axis=-1)
        self.shape = tuple([self.n] * self.d)
        if self.kind == "ball":
            r = np.linalg.norm(self.points - self.center, axis=1)
            self.interior = r < self.radius - 1e-12
        else:
            inside = np.ones(len(self.points), dtype=bool)
            for i in range(self.d):
                inside &= (self.points[:, i] > self.bounds[i, 0] + 1e-12)
                inside &= (self.points[:, i] < self.bounds[i, 1] - 1e-12)
            self.interior = inside
        self.n_interior = int(self.interior.sum())
        self.idx_of = -np.ones(len(self.points), dtype=np.int64)
        self.idx_of[self.interior] = np.arange(self.n_interior)

    # -- point predicates ------------------------------------------------

    def contains(self, pts):
        pts = np.atleast_2d(pts)
        if self.kind == "ball":
            return np.linalg.norm(pts - self.center, axis=1) < self.radius
        ok = np.ones(len(pts), dtype=bool)
        for i in range(self.d):
            ok &= (pts[:, i] > self.bounds[i, 0]) & (pts[:, i] < self.bounds[i, 1])
        return ok

    def boundary_distance(self, pts):
        pts = np.atleast_2d(pts)
        if self.kind == "ball":
            return self.radius - np.linalg.norm(pts - self.center, axis=1)
        lo = np.min(pts - self.bounds[:, 0], axis=1)
        hi = np.min(self.bounds[:, 1] - pts, axis=1)
        return np.minimum(lo, hi)

    def crossing_point(self, inside_pts, outside_pts, iters=40):
        """Boundary crossing of segments, by bisection then projection."""
        a = np.array(inside_pts, float, copy=True)
        b = np.array(outside_pts, float, copy=True)
        for _ in range(iters):
            mid = 0.5 * (a + b)
            inside = self.contains(mid)
            a[inside] = mid[inside]
            b[~inside] = mid[~inside]
        out = 0.5 * (a + b)
        return self.project_boundary(out)

    def project_boundary(self, pts):
        pts = np.atleast_2d(pts).astype(float)
        if self.kind == "ball":
            v = pts - self.center
            nv = np.linalg.norm(v, axis=1, keepdims=True)
            nv[nv == 0] = 1.0
            return self.center + v / nv * self.radius
        out = np.clip(pts, self.bounds[:, 0], self.bounds[:, 1])
        # push the closest coordinate to its face
        gap_lo = out - self.bounds[:, 0]
        gap_hi = self.bounds[:, 1] - out
        both = np.stack([gap_lo, gap_hi], axis=-1)  # (m, d, 2)
        flat = both.reshape(len(out), -1)
        j = np.argmin(flat, axis=1)
        ax, side = j // 2, j % 2
        out[np.arange(len(out)), ax] = self.bounds[ax, side]
        return out

    def mean_exit_time_bound(self):
        if self.kind == "ball":
            return self.radius ** 2 / self.d
        hw = (self.bounds[:, 1] - self.bounds[:, 0]) / 2.0
        return float(np.sum(hw ** 2)) / self.d

    def __repr__(self):
        if self.kind == "ball":
            return "Domain.ball(d=%d, R=%g, n=%d)" % (self.d, self.radius, self.n)
        return "Domain.box(d=%d, n=%d)" % (self.d, self.n)


class FieldFunction:
    """Scalar field on a domain grid with multilinear interpolation.

    dense holds values on the full grid; exterior nodes carry the
    boundary trace extended outward so interpolation stays sane near a
    curved boundary.
    """

    def __init__(self, domain, dense, boundary=None):
        self.domain = domain
        self.dense = np.asarray(dense, float).reshape(domain.shape)
        self.boundary = boundary  # callable on boundary points, or None

    @classmethod
    def from_interior(cls, domain, interior_vals, boundary=None):
        dense = np.zeros(len(domain.points))
        dense[domain.interior] = interior_vals
        ext = ~domain.interior
        if boundary is not None:
            bpts = domain.project_boundary(domain.points[ext])
            dense[ext] = np.asarray(boundary(bpts), float)
        return cls(domain, dense, boundary)

    @classmethod
    def from_callable(cls, domain, func, boundary=None):
        dense = np.asarray(func(domain.points), float)
        if boundary is None:
            def boundary(z):
                return np.asarray(func(np.atleast_2d(z)), float)
        return cls(domain, dense, boundary)

    def interior_values(self):
        return self.dense.ravel()[self.domain.interior]

    def __call__(self, pts):
        pts = np.atleast_2d(pts)
        dom = self.domain
        xi = (pts - dom.bounds[:, 0]) / dom.h
        xi = np.clip(xi, 0.0, dom.n - 1.0 - 1e-9)
        i0 = np.floor(xi).astype(np.int64)
        frac = xi - i0
        flat = self.dense.ravel()
        out = np.zeros(len(pts))
        for corner in range(2 ** dom.d):
            w = np.ones(len(pts))
            idx = np.zeros(len(pts), dtype=np.int64)
            for ax in range(dom.d):  # axis 0 is slowest in C order
                bit = (corner >> ax) & 1
                w *= frac[:, ax] if bit else (1.0 - frac[:, ax])
                idx = idx * dom.n + (i0[:, ax] + bit)
            out += w * flat[idx]
        return out

    def gradient(self):
        """Central-difference gradient fields, one per axis."""
        grads = np.gradient(self.dense, self.domain.h)
        if self.domain.d == 1:
            grads = [grads]
        return [FieldFunction(self.domain, g) for g in grads]

    def max_interior(self):
        return float(np.max(np.abs(self.interior_values())))


# -- sparse operator ------------------------------------------------------

def _assemble(domain, boundary_func):
    """Sparse L and vector rb with (1/2)Delta u ~ L u + rb on interior nodes.

    boundary_func is evaluated at cut points (ball) or face points (box).
    """
    d, h, n = domain.d, domain.h, domain.n
    pts = domain.points
    interior = domain.interior
    idx_of = domain.idx_of
    ni = domain.n_interior
    int_ids = np.nonzero(interior)[0]
    strides = [n ** (d - 1 - ax) for ax in range(d)]

    # leg lengths per axis/side: h for interior neighbor, alpha*h to the
    # boundary otherwise (Shortley-Weller)
    legs = np.full((ni, d, 2), h)
    bvals = np.zeros((ni, d, 2))
    has_bnd = np.zeros((ni, d, 2), dtype=bool)
    nb_idx = np.full((ni, d, 2), -1, dtype=np.int64)

    for ax in range(d):
        st = strides[ax]
        for side, sgn in enumerate((+1, -1)):
            coord = (int_ids // st) % n
            can = (coord + sgn >= 0) & (coord + sgn < n)
            nb = int_ids + sgn * st
            nb_interior = np.zeros(len(int_ids), dtype=bool)
            nb_interior[can] = interior[np.clip(nb, 0, len(pts) - 1)[can]] & can[can]
            inb = nb_interior
            nb_idx[inb, ax, side] = idx_of[nb[inb]]
            cut = ~inb
            if np.any(cut):
                p_in = pts[int_ids[cut]]
                if domain.kind == "box":
                    alpha = np.ones(cut.sum())
                    p_b = p_in.copy()
                    p_b[:, ax] = domain.bounds[ax, 1 if sgn > 0 else 0]
                    # distance from node to face along the axis
                    alpha = np.abs(p_b[:, ax] - p_in[:, ax]) / h
                else:
                    p_b, alpha = _ball_cut(domain, p_in, ax, sgn)
                legs[cut, ax, side] = np.maximum(alpha, 1e-3) * h
                has_bnd[cut, ax, side] = True
                if boundary_func is not None:
                    bvals[cut, ax, side] = np.asarray(boundary_func(p_b), float)

    rows, cols, vals = [], [], []
    rb = np.zeros(ni)
    diag = np.zeros(ni)
    for ax in range(d):
        hp = legs[:, ax, 0]
        hm = legs[:, ax, 1]
        cp = 2.0 / (hp * (hp + hm))
        cm = 2.0 / (hm * (hp + hm))
        diag -= cp + cm
        for side, c in ((0, cp), (1, cm)):
            j = nb_idx[:, ax, side]
            link = j >= 0
            rows.append(np.nonzero(link)[0])
            cols.append(j[link])
            vals.append(c[link])
            bb = has_bnd[:, ax, side]
            rb[bb] += c[bb] * bvals[bb, ax, side]
    rows.append(np.arange(ni))
    cols.append(np.arange(ni))
    vals.append(diag)
    L = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(ni, ni)) * 0.5
    return L, rb * 0.5


def _ball_cut(domain, p_in, ax, sgn):
    """Boundary crossing along +-axis from interior points of a ball."""
    c = domain.center
    R = domain.radius
    q = p_in - c
    # solve (q_ax + t*sgn)^2 + rest = R^2, t in (0, h]
    rest = np.sum(q ** 2, axis=1) - q[:, ax] ** 2
    disc = np.sqrt(np.maximum(R ** 2 - rest, 0.0))
    t = sgn * (sgn * disc - q[:, ax])
    t = np.clip(t, 1e-12, domain.h)
    p_b = p_in.copy()
    p_b[:, ax] = p_in[:, ax] + sgn * t
    return p_b, t / domain.h


class GridOperator:
    """Cached (1/2)Delta discretization for one domain."""

    # above this many interior nodes, direct LU fill (3d/4d grids) is
    # far slower than ILU-preconditioned LGMRES
    ITERATIVE_CUTOFF = 12000

    def __init__(self, domain):
        self.domain = domain
        self._L0, _ = _assemble(domain, None)
        self._geo = None
        self._ilu = None

    def laplacian(self, boundary_func):
        if boundary_func is None:
            return self._L0, np.zeros(self.domain.n_interior)
        L, rb = _assemble(self.domain, boundary_func)
        return L, rb

    def solve(self, A, b):
        """Solve A x = b; A is the Laplacian plus a nonpositive diagonal
        shift, so the ILU of the bare Laplacian preconditions it well."""
        if self.domain.n_interior <= self.ITERATIVE_CUTOFF:
            return spsolve(A.tocsc(), b)
        if self._ilu is None:
            self._ilu = spilu(self._L0.tocsc(), drop_tol=1e-5,
                              fill_factor=12)
        M = LinearOperator(A.shape, self._ilu.solve)
        x, info = lgmres(A.tocsc(), b, M=M, rtol=1e-10, atol=0.0,
                         maxiter=400)
        if info != 0:
            return spsolve(A.tocsc(), b)
        return x


_op_cache = {}


def get_operator(domain):
    key = id(domain)
    if key not in _op_cache:
        _op_cache[key] = GridOperator(domain)
    return _op_cache[key]


def solve_linear(domain, c_vals, source_vals, boundary_func):
    """Solve (1/2)Delta v - c v = -source, v = boundary on the boundary.

    c_vals and source_vals are arrays on interior nodes (or scalars).
    """
    op = get_operator(domain)
    L, rb = op.laplacian(boundary_func)
    ni = domain.n_interior
    c = np.broadcast_to(np.asarray(c_vals, float), (ni,))
    s = np.broadcast_to(np.asarray(source_vals, float), (ni,))
    A = L - sparse.diags(c)
    v = op.solve(A, -s - rb)
    return FieldFunction.from_interior(domain, v, boundary_func)


def potential_U(domain, f):
    """U f with (1/2)Delta(Uf) = -f, zero boundary data.

    f may be a FieldFunction, a callable on points, or interior values.
    """
    if isinstance(f, FieldFunction):
        vals = f.interior_values()
    elif callable(f):
        vals = np.asarray(f(domain.points[domain.interior]), float)
    else:
        vals = np.broadcast_to(np.asarray(f, float), (domain.n_interior,))
    zero = lambda z: np.zeros(len(np.atleast_2d(z)))
    return solve_linear(domain, 0.0, vals, zero)


def harmonic_extension(domain, boundary_func):
    return solve_linear(domain, 0.0, 0.0, boundary_func)


class PsiTable:
    """Vectorized psi and psi' over [0, lam_max] for grid solves."""

    def __init__(self, mech, lam_max):
        self.mech = mech
        self.lam_max = max(float(lam_max), 1e-6)
        from .mechanism import Empty
        self.analytic = mech.levy.is_empty
        if not self.analytic:
            from scipy.interpolate import PchipInterpolator
            lo = self.lam_max * 1e-14
            grid = np.geomspace(lo, self.lam_max * 1.01, 3000)
            pv = np.array([mech.psi(l) for l in grid])
            dv = np.array([mech.psi_deriv(1, l) for l in grid])
            pos = pv > 0
            self._logp = PchipInterpolator(np.log(grid[pos]), np.log(pv[pos]))
            dpos = dv > 0
            if dpos.sum() >= 4:
                self._logd = PchipInterpolator(np.log(grid[dpos]),
                                               np.log(dv[dpos]))
            else:
                self._logd = None
            self._grid0 = lo

    def psi(self, x):
        x = np.asarray(x, float)
        m = self.mech
        if self.analytic:
            return m.a1 * x + m.a2 * x * x
        out = np.zeros_like(x)
        pos = x > self._grid0
        out[pos] = np.exp(self._logp(np.log(x[pos])))
        tiny = (x > 0) & ~pos
        if np.any(tiny):
            out[tiny] = np.array([m.psi(t) for t in np.atleast_1d(x[tiny])])
        return out

    def dpsi(self, x):
        x = np.asarray(x, float)
        m = self.mech
        if self.analytic:
            return m.a1 + 2 * m.a2 * x
        out = np.full_like(x, m.a1)
        if self._logd is None:
            return out
        pos = x > self._grid0
        out[pos] = np.exp(self._logd(np.log(x[pos])))
        tiny = (x > 0) & ~pos
        if np.any(tiny):
            out[tiny] = np.array([m.psi_deriv(1, t)
                                  for t in np.atleast_1d(x[tiny])])
        return out


def _psi_table(mech, lam_max):
    key = ("psitab", round(math.log10(max(lam_max, 1e-6)), 1))
    if key not in mech._cache:
        mech._cache[key] = PsiTable(mech, 10 ** (math.log10(max(lam_max, 1e-6)) + 0.2))
    return mech._cache[key]


def solve_semilinear(domain, mech, boundary_func, tol=1e-8, max_iter=60,
                     initial=None):
    """Damped Newton for (1/2)Delta u = psi(u), u = boundary on the boundary."""
    op = get_operator(domain)
    L, rb = op.laplacian(boundary_func)
    if initial is not None:
        u = np.array(initial.interior_values(), copy=True)
    else:
        u = op.solve(L, -rb)  # harmonic extension
    u = np.maximum(u, 0.0)
    bmax = float(np.max(u)) if len(u) else 0.0
    tab = _psi_table(mech, max(bmax, 1e-3) * 1.5 + 1.0)

    def residual(w):
        return L @ w + rb - tab.psi(w)

    r = residual(u)
    rn = np.max(np.abs(r))
    for _ in range(max_iter):
        if rn < tol:
            break
        J = L - sparse.diags(tab.dpsi(u))
        delta = op.solve(J, -r)
        step = 1.0
        for _ in range(40):
            un = np.maximum(u + step * delta, 0.0)
            rnew = residual(un)
            if np.max(np.abs(rnew)) < rn:
                break
            step *= 0.5
        else:
            break
        u, r = un, rnew
        rn = np.max(np.abs(r))
    if rn >= tol * 10:
        raise RuntimeError("semilinear Newton stalled at residual %g" % rn)
    return FieldFunction.from_interior(domain, u, boundary_func)


def solve_linearized(domain, mech, u_field, source, boundary_func):
    """Solve (1/2)Delta v - psi'(u) v = -source with given boundary data."""
    if u_field is None:
        c = 0.0
    else:
        uv = u_field.interior_values()
        tab = _psi_table(mech, max(float(np.max(uv)), 1e-3) * 1.5 + 1.0)
        c = tab.dpsi(np.maximum(uv, 0.0))
    if isinstance(source, FieldFunction):
        s = source.interior_values()
    elif callable(source):
        s = np.asarray(source(domain.points[domain.interior]), float)
    else:
        s = source
    if boundary_func is None:
        boundary_func = lambda z: np.zeros(len(np.atleast_2d(z)))
    return solve_linear(domain, c, s, boundary_func)


# -- ball potential theory ------------------------------------------------

class HarmonicKit:
    """Closed-form kernels on a ball, normalized for (1/2)Delta."""

    def __init__(self, domain, x):
        if domain.kind != "ball":
            raise ValueError("HarmonicKit needs a ball")
        self.domain = domain
        self.x = np.asarray(x, float)
        if not domain.contains(self.x[None])[0]:
            raise ValueError("reference point must be interior")

    def green(self, y, w):
        """Green function of (1/2)Delta: twice the Delta-Green function."""
        dom = self.domain
        d, R, c = dom.d, dom.radius, dom.center
        y = np.asarray(y, float) - c
        w = np.asarray(w, float) - c
        ry = np.linalg.norm(y - w)
        if ry == 0:
            raise ValueError("Green function pole")
        nw = np.linalg.norm(w)
        if nw == 0:
            if d == 2:
                g = (1.0 / (2 * math.pi)) * math.log(R / ry)
            else:
                cd = 1.0 / ((d - 2) * sphere_area(d))
                g = cd * (ry ** (2 - d) - R ** (2 - d))
            return 2.0 * g
        # image point
        w_star = w * (R ** 2 / nw ** 2)
        rs = np.linalg.norm(y - w_star) * nw / R
        if d == 2:
            g = (1.0 / (2 * math.pi)) * math.log(rs / ry)
        else:
            cd = 1.0 / ((d - 2) * sphere_area(d))
            g = cd * (ry ** (2 - d) - rs ** (2 - d))
        return 2.0 * g

    def poisson(self, y, z):
        """Harmonic-measure density on the sphere (integrates to 1)."""
        dom = self.domain
        d, R, c = dom.d, dom.radius, dom.center
        y = np.atleast_2d(np.asarray(y, float)) - c
        z = np.atleast_2d(np.asarray(z, float)) - c
        ny2 = np.sum(y ** 2, axis=-1)
        dist = np.linalg.norm(y - z, axis=-1)
        # (R^2 - |y|^2) / (omega_d R |y-z|^d), omega_d = unit-sphere area
        return (R ** 2 - ny2) / (sphere_area(d) * R * dist ** d)

    def martin(self, y, z):
        return self.poisson(y, z) / self.poisson(self.x, z)

    def martin_field(self, z):
        """Martin kernel K(., z) as a FieldFunction."""
        dom = self.domain
        z = np.asarray(z, float)

        def f(pts):
            pts = np.atleast_2d(pts)
            inside = dom.contains(pts)
            out = np.zeros(len(pts))
            safe = pts.copy()
            safe[~inside] = self.x  # placeholder, overwritten below
            out = self.martin(safe, z[None, :])
            out[~inside] = 0.0
            return out
        dense = f(dom.points)
        return FieldFunction(dom, dense, boundary=lambda zz: np.zeros(
            len(np.atleast_2d(zz))))

    def harmonic_measure_of_cap(self, y, z_center, eps, n_quad=400):
        """m_y(cap) for the chordal cap {z on sphere: |z - z_center| < eps}."""
        if eps <= 0:
            raise ValueError("eps must be positive")
        dom = self.domain
        d, R, c = dom.d, dom.radius, dom.center
        y = np.asarray(y, float)
        zc = np.asarray(z_center, float)
        axis = (zc - c) / np.linalg.norm(zc - c)
        half = min(1.0, eps / (2.0 * R))
        theta_cap = 2.0 * math.asin(half)
        if d == 2:
            perp = np.array([-axis[1], axis[0]])
            th = np.linspace(-theta_cap, theta_cap, n_quad)
            z = c + R * (np.cos(th)[:, None] * axis + np.sin(th)[:, None] * perp)
            dens = self.poisson(np.repeat(y[None, :], len(z), 0), z)
            return float(np.trapz(dens * R, th))
        if d != 3:
            raise NotImplementedError("cap quadrature implemented for d=2,3")
        basis = _orthonormal_frame(axis, d)
        mu = np.linspace(math.cos(theta_cap), 1.0, n_quad)  # cos(theta)
        phi = np.linspace(0.0, 2 * math.pi, 64, endpoint=False)
        MU, PH = np.meshgrid(mu, phi, indexing="ij")
        sth = np.sqrt(1 - MU ** 2)
        z = (c + R * (MU[..., None] * axis
                      + sth[..., None] * (np.cos(PH)[..., None] * basis[0]
                                          + np.sin(PH)[..., None] * basis[1])))
        zf = z.reshape(-1, d)
        dens = self.poisson(np.repeat(y[None, :], len(zf), 0), zf)
        dens = dens.reshape(MU.shape)
        # surface element R^2 dmu dphi
        return float(np.trapz(np.mean(dens, axis=1) * 2 * math.pi * R ** 2, mu))

    def sample_exit(self, y, rng, size):
        """Exit points of Brownian motion from the ball started at y.

        Inverse-CDF in the polar angle relative to y's direction; exact
        for the Poisson kernel.
        """
        dom = self.domain
        d, R, c = dom.d, dom.radius, dom.center
        y = np.asarray(y, float)
        v = y - c
        ny = np.linalg.norm(v)
        if ny < 1e-14:
            z = rng.standard_normal((size, d))
            z /= np.linalg.norm(z, axis=1, keepdims=True)
            return c + R * z
        axis = v / ny
        rho = ny / R
        if d == 2:
            # exit angle relative to axis is wrapped Cauchy
            phi = (rng.random(size) - 0.5) * 2 * math.pi
            th = 2.0 * np.arctan((1 - rho) / (1 + rho) * np.tan(phi / 2.0))
            mu = np.cos(th)
            sth = np.sin(th)
            basis = _orthonormal_frame(axis, d)
            z = mu[:, None] * axis + sth[:, None] * basis[0]
            return c + R * z
        if d == 3:
            # closed-form inverse CDF in t = (1+rho^2-2 rho mu)^{-1/2}
            t_min = 1.0 / (1.0 + rho)
            t_max = 1.0 / (1.0 - rho)
            t = t_min + rng.random(size) * (t_max - t_min)
            mu = (1.0 + rho ** 2 - t ** (-2.0)) / (2.0 * rho)
        else:
            mu_grid = np.linspace(-1.0, 1.0, 4001)
            dist2 = 1.0 + rho ** 2 - 2.0 * rho * mu_grid
            dens = ((1 - rho ** 2) / dist2 ** (d / 2.0)
                    * (1 - mu_grid ** 2) ** ((d - 3) / 2.0))
            cdf = np.cumsum(dens)
            cdf -= cdf[0]
            cdf /= cdf[-1]
            mu = np.interp(rng.random(size), cdf, mu_grid)
        mu = np.clip(mu, -1.0, 1.0)
        sth = np.sqrt(np.maximum(0.0, 1 - mu ** 2))
        basis = _orthonormal_frame(axis, d)
        w = rng.standard_normal((size, d - 1))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        z = mu[:, None] * axis + sth[:, None] * (w @ basis)
        return c + R * z


def _orthonormal_frame(axis, d):
    """Rows: d-1 unit vectors spanning the complement of axis."""
    _, _, vt = np.linalg.svd(axis[None, :])
    return vt[1:]


# -- caps and hitting fields ----------------------------------------------

class Cap:
    """Chordal boundary cap: {z on the boundary : |z - center| < eps}."""

    def __init__(self, center, eps):
        self.center = np.asarray(center, float)
        self.eps = float(eps)

    def indicator_smooth(self, pts, h):
        """1 inside, 0 outside, linear ramp of width h at the rim."""
        pts = np.atleast_2d(pts)
        dist = np.linalg.norm(pts - self.center, axis=1)
        return np.clip((self.eps + 0.5 * h - dist) / h, 0.0, 1.0)


def cap_boundary_func(caps, lam, h):
    def f(z):
        z = np.atleast_2d(z)
        out = np.zeros(len(z))
        for cap in caps:
            out = np.maximum(out, lam * cap.indicator_smooth(z, h))
        return out
    return f


def hitting_field(domain, mech, caps, tol=1e-4, max_doublings=40,
                  lam0=1.0):
    """u = lim of semilinear solves with boundary lam * cap indicator."""
    if not caps:
        zero = lambda z: np.zeros(len(np.atleast_2d(z)))
        return FieldFunction.from_interior(
            domain, np.zeros(domain.n_interior), zero)
    lam = lam0
    prev = None
    h = domain.h
    # the solution grows like lam in a boundary layer at the cap forever;
    # convergence is judged away from that layer
    pts = domain.points[domain.interior]
    core = domain.boundary_distance(pts) >= 2.5 * h
    for _ in range(max_doublings):
        bf = cap_boundary_func(caps, lam, h)
        try:
            u = solve_semilinear(domain, mech, bf, initial=prev)
        except RuntimeError:
            lam *= 0.5
            continue
        if prev is not None:
            diff = np.max(np.abs(u.interior_values()[core]
                                 - prev.interior_values()[core]))
            if diff < tol * max(1.0, float(np.max(u.interior_values()[core]))):
                return u
        prev = u
        lam *= 2.0
    raise RuntimeError("hitting-field ladder did not converge")
