"""Command-line entry point.

Exit codes: 0 success, 1 numerical/statistical failure, 2 usage error
(click's default for bad invocations).
"""

import json
import os
import sys

import click
import numpy as np

from .. import combinatorics as C
from .. import limits as LM
from ..field import Domain, FieldFunction, Cap, hitting_field, \
    solve_semilinear, potential_U, harmonic_extension
from ..mechanism import binary, from_spec
from ..superprocess import ParticleSystem, estimate_laplace, \
    sample_excursion_exit
from ..backbone import ConditioningSystem, simulate_backbone
from .config import RunConfig, RunManifest
from . import suites


class Ctx:
    def __init__(self, config, seed, out, replicas, threads, as_json):
        values = {}
        if config:
            with open(config) as f:
                try:
                    values = json.load(f)
                except ValueError as e:
                    raise click.UsageError("bad config %s: %s"
                                           % (config, e))
        if seed is not None:
            values["seed"] = seed
        if replicas is not None:
            values["replicas"] = replicas
        if threads is not None:
            values["threads"] = threads
        self.cfg = RunConfig(values)
        self.out = out or self.cfg.get("out_dir", ".")
        self.as_json = as_json

    def domain(self):
        d = self.cfg["domain"]
        if d["kind"] == "ball":
            return Domain.ball(d["d"], radius=d.get("radius", 1.0),
                               n=d.get("n"))
        return Domain.box(d["d"], halfwidth=d.get("halfwidth", 0.5),
                          n=d.get("n"))

    def mech(self):
        return from_spec(self.cfg["mechanism"])

    def emit(self, payload):
        if self.as_json:
            click.echo(json.dumps(payload, indent=2, default=str))
        else:
            for k, v in payload.items():
                click.echo("%s: %s" % (k, v))


def _fail(msg):
    click.echo("error: %s" % msg, err=True)
    sys.exit(1)


@click.group()
@click.option("--config", type=click.Path(exists=True), default=None,
              help="JSON config file")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--replicas", type=int, default=None)
@click.option("--threads", type=int, default=None)
@click.option("--json", "as_json", is_flag=True, default=False)
@click.pass_context
def main(ctx, config, seed, out, replicas, threads, as_json):
    """Simulation and verification toolkit for branching exit measures."""
    ctx.obj = Ctx(config, seed, out, replicas, threads, as_json)


# -- mech ------------------------------------------------------------------

@main.group()
def mech():
    """Branching-mechanism calculus."""


@mech.command("eval")
@click.option("--lam", type=float, multiple=True, default=(0.5, 1.0, 2.0))
@click.pass_obj
def mech_eval(ctx, lam):
    m = ctx.mech()
    try:
        ctx.emit({"psi(%g)" % l: m.psi(l) for l in lam})
    except ArithmeticError as e:
        _fail(e)


@mech.command("derive")
@click.option("--u", type=float, default=0.5)
@click.option("--orders", type=int, default=5)
@click.pass_obj
def mech_derive(ctx, u, orders):
    m = ctx.mech()
    try:
        ctx.emit({"b(%d, %g)" % (j, u): m.b_coeff(j, u)
                  for j in range(2, orders + 1)})
    except ArithmeticError as e:
        _fail(e)


@mech.command("sample")
@click.option("--j", type=int, default=2)
@click.option("--u", type=float, default=0.0)
@click.option("--count", type=int, default=10)
@click.pass_obj
def mech_sample(ctx, j, u, count):
    m = ctx.mech()
    rng = np.random.default_rng(ctx.cfg["seed"])
    s = m.sample_node_mass(j, u, rng, size=count)
    ctx.emit({"samples": list(np.round(np.atleast_1d(s), 6))})


# -- field -----------------------------------------------------------------

@main.group()
def field():
    """Elliptic solves on the grid."""


@field.command("solve")
@click.option("--amp", type=float, default=0.6)
@click.pass_obj
def field_solve(ctx, amp):
    dom = ctx.domain()
    m = ctx.mech()
    phi = suites.gaussian_boundary(dom.bounds[:, 1], amp=amp)
    try:
        u = solve_semilinear(dom, m, phi)
    except RuntimeError as e:
        _fail(e)
    ctx.emit({"u(center)": float(u(np.atleast_2d(dom.center))[0]),
              "u_max": float(u.dense.max())})


@field.command("hit")
@click.option("--eps", type=float, default=0.3)
@click.pass_obj
def field_hit(ctx, eps):
    dom = ctx.domain()
    if dom.kind != "ball":
        _fail("hitting fields are computed on balls")
    z = np.array(dom.center, float)
    z[0] += dom.radius
    try:
        v = hitting_field(dom, ctx.mech(), [Cap(z, eps)])
    except RuntimeError as e:
        _fail(e)
    ctx.emit({"v(center)": float(v(np.atleast_2d(dom.center))[0])})


@field.command("potential")
@click.pass_obj
def field_potential(ctx):
    dom = ctx.domain()
    phi = suites.gaussian_boundary(dom.bounds[:, 1])
    h = harmonic_extension(dom, phi)
    p = potential_U(dom, h)
    ctx.emit({"U(h)(center)": float(p(np.atleast_2d(dom.center))[0])})


# -- sp --------------------------------------------------------------------

@main.group()
def sp():
    """Measure-valued process estimators."""


@sp.command("exit")
@click.pass_obj
def sp_exit(ctx):
    dom = ctx.domain()
    ps = ParticleSystem(ctx.mech(), dom, K=ctx.cfg["K"])
    rng = np.random.default_rng(ctx.cfg["seed"])
    w, xms = sample_excursion_exit(ps, dom.center, [dom], rng)
    ctx.emit({"weight": w, "atoms": len(xms[0].points),
              "total_mass": float(xms[0].masses.sum())})


@sp.command("laplace")
@click.pass_obj
def sp_laplace(ctx):
    dom = ctx.domain()
    m = ctx.mech()
    phi = suites.gaussian_boundary(dom.bounds[:, 1], amp=0.6)
    row = suites.check_calibration(m, dom, dom.center, phi,
                                   ctx.cfg["replicas"], ctx.cfg["seed"],
                                   K=ctx.cfg["K"])
    ctx.emit(row)
    if not row["passed"]:
        sys.exit(1)


@sp.command("palm")
@click.pass_obj
def sp_palm(ctx):
    dom = ctx.domain()
    ones = FieldFunction(dom, np.ones(dom.shape))
    row = suites.check_palm(binary(), dom, dom.center, [ones, ones],
                            ctx.cfg["replicas"], ctx.cfg["seed"],
                            K=ctx.cfg["K"])
    ctx.emit(row)
    if not row["passed"]:
        sys.exit(1)


# -- backbone --------------------------------------------------------------

def _conditioning(ctx, dom):
    zs = [np.asarray(z, float) for z in ctx.cfg["z_points"]]
    phis = [suites.gaussian_boundary(z, amp=1.0, width=0.15) for z in zs]
    return ConditioningSystem.from_boundary_data(dom, ctx.mech(), phis)


@main.group()
def backbone():
    """Conditioned-tree simulation."""


@backbone.command("run")
@click.pass_obj
def backbone_run(ctx):
    dom = ctx.domain()
    cs = _conditioning(ctx, dom)
    rng = np.random.default_rng(ctx.cfg["seed"])
    tree, xm = simulate_backbone(cs, dom.shrink(0.7), dom.center, rng,
                                 K=ctx.cfg["K"])
    ctx.emit({"leaves": len(tree.leaves()), "exit_atoms": len(xm.points),
              "exit_mass": float(xm.masses.sum())})


@backbone.command("compare")
@click.pass_obj
def backbone_compare(ctx):
    dom = ctx.domain()
    zs = [np.asarray(z, float) for z in ctx.cfg["z_points"]]
    cond = [suites.gaussian_boundary(z, amp=1.0, width=0.15) for z in zs]
    test = [suites.gaussian_boundary(zs[0], amp=0.5, width=0.3)]
    reps = ctx.cfg["replicas"]
    row = suites.check_tree_equivalence(ctx.mech(), dom, dom.center, cond, test,
                                 [dom.shrink(0.7)], reps, max(reps // 10, 50),
                                 ctx.cfg["seed"], K=ctx.cfg["K"])
    ctx.emit(row)
    if not row["passed"]:
        sys.exit(1)


# -- limits ----------------------------------------------------------------

@main.group()
def limits():
    """Small-target limit theory."""


@limits.command("kernels")
@click.pass_obj
def limits_kernels(ctx):
    dom = ctx.domain()
    zs = [np.asarray(z, float) for z in ctx.cfg["z_points"]]
    try:
        ks = LM.build_limit_kernels(dom, ctx.mech(), dom.center, zs,
                                    delta0=ctx.cfg["delta0"])
    except (ValueError, ArithmeticError) as e:
        _fail(e)
    probe = np.atleast_2d(dom.center)
    ctx.emit({("K[%d](center)" % A): float(ks.K[A](probe)[0])
              for A in sorted(ks.K)})


@limits.command("blowup")
@click.option("--beta", type=float, default=None)
@click.pass_obj
def limits_blowup(ctx, beta):
    beta = beta if beta is not None else ctx.cfg["beta"]
    try:
        rows, scan = suites.check_blowup(beta, ctx.cfg["gamma_ladder"])
    except (ValueError, ArithmeticError) as e:
        _fail(e)
    out = os.path.join(ctx.out, "blowup.csv")
    with open(out, "w") as f:
        f.write("gamma,m2,m2_closed,node_median,ratio_n3\n")
        for i, g in enumerate(scan.gammas):
            f.write("%g,%g,%g,%g,%g\n" % (g, scan.m2[i], scan.m2_closed[i],
                                          scan.node_median[i],
                                          scan.ratio_n3[i]))
    ctx.emit({r["check"]: "%.4f (want %.4f +- %.2g) %s"
              % (r["value"], r["bound"], r.get("band", 0),
                 "ok" if r["passed"] else "FAIL") for r in rows})
    if not all(r["passed"] for r in rows):
        sys.exit(1)


@limits.command("family")
@click.pass_obj
def limits_family(ctx):
    try:
        rows = suites.check_family()
    except (ValueError, RuntimeError) as e:
        _fail(e)
    ctx.emit({r["check"]: "%.4f (< %.2f) %s"
              % (r["value"], r["bound"], "ok" if r["passed"] else "FAIL")
              for r in rows})
    if not all(r["passed"] for r in rows):
        sys.exit(1)


# -- verify ----------------------------------------------------------------

@main.group()
def verify():
    """Orchestrated verification suites."""


def _finish(ctx, man, name):
    os.makedirs(ctx.out, exist_ok=True)
    man.save(os.path.join(ctx.out, name + ".json"))
    man.write_csv(os.path.join(ctx.out, name + ".csv"))
    for r in man.results:
        click.echo("%-32s %s" % (r["check"],
                                 "pass" if r["passed"] else "FAIL"))
    if not man.all_passed:
        sys.exit(1)


@verify.command("identities")
@click.option("--fault", type=str, default=None,
              help="inject a fault (e.g. 'transform') as a negative control")
@click.pass_obj
def verify_identities(ctx, fault):
    _finish(ctx, suites.suite_identities(ctx.cfg, fault=fault),
            "identities")


@verify.command("montecarlo")
@click.pass_obj
def verify_montecarlo(ctx):
    _finish(ctx, suites.suite_montecarlo(ctx.cfg), "montecarlo")


@verify.command("all")
@click.pass_obj
def verify_all(ctx):
    man1 = suites.suite_identities(ctx.cfg)
    man2 = suites.suite_montecarlo(ctx.cfg)
    man2.results = man1.results + man2.results
    _finish(ctx, man2, "all")


if __name__ == "__main__":
    main()
