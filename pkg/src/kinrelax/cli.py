"""Command-line front end: experiment orchestration and CSV/SVG reports.

Subcommands run one verification suite each and exit nonzero when any
checked invariant fails; ``report`` runs the full acceptance table.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import VERSION, ConfigError, ExperimentConfig, apply_thread_limit


def _write_csv(path, header_lines, columns, rows):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(line + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.12g}" if isinstance(v, float) else str(v) for v in row) + "\n")
    return path


def _maybe_plot(path, x, ys, labels, xlabel, ylabel, loglog=False):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib unavailable; skipping plot", file=sys.stderr)
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    for y, lab in zip(ys, labels):
        if loglog:
            ax.loglog(x, y, marker="o", ms=3, label=lab)
        else:
            ax.plot(x, y, marker="o", ms=3, label=lab)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def _build_parser():
    ap = argparse.ArgumentParser(prog="kinrelax", description=__doc__)
    ap.add_argument("--config", help="configuration file (key = value sections)")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override one configuration entry")
    ap.add_argument("--out", help="output directory (overrides output.dir)")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("geom-check", help="ray-geometry invariant suite")
    sub.add_parser("chvar-check", help="integration-identity defect tables")
    sp = sub.add_parser("spectral", help="eigenvalue and norm profiles")
    sp.add_argument("--eta-max", type=float, default=200.0)
    sp.add_argument("--n-eta", type=int, default=25)
    sp.add_argument("--power", type=int, default=2)
    sub.add_parser("invariant", help="stationary-density checks")
    sm = sub.add_parser("simulate", help="Monte Carlo decay run")
    sm.add_argument("--particles", type=int)
    sm.add_argument("--seed", type=int)
    sm.add_argument("--t-max", type=float)
    sm.add_argument("--record", help="comma list or log:lo:hi:n")
    sm.add_argument("--init", choices=["equilibrium", "uniform-maxwell", "ring", "custom-file"])
    sm.add_argument("--init-file", help="npz with x, v arrays for --init custom-file")
    sm.add_argument("--plot", action="store_true")
    tb = sub.add_parser("tauberian", help="boundary-function and inversion tables")
    tb.add_argument("--n", type=int)
    tb.add_argument("--p", type=int)
    tb.add_argument("--eta-max", type=float)
    tb.add_argument("--t-list")
    rp = sub.add_parser("report", help="full acceptance table")
    rp.add_argument("--fast", action="store_true", help="reduced particle counts (smoke run)")
    return ap


def _config_from_args(args):
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        for item in args.set:
            dotted, value = item.split("=", 1)
            section, key = dotted.split(".", 1)
            cfg.parser.set(section, key, value)
    else:
        cfg = ExperimentConfig.from_overrides(args.set)
    if args.out:
        cfg.parser.set("output", "dir", args.out)
    return cfg


def cmd_geom_check(cfg, args):
    from . import geometry as geo

    dom = cfg.domain()
    rng = np.random.default_rng(1234)
    n = 2000
    r = dom.radius * np.sqrt(rng.random(n))
    ang = rng.random(n) * 2 * np.pi
    if dom.dim == 2:
        x = np.stack([r * np.cos(ang), r * np.sin(ang)], -1)
        v = rng.normal(size=(n, 2))
    else:
        mu = rng.uniform(-1, 1, n)
        x = r[:, None] * np.stack(
            [np.sqrt(1 - mu**2) * np.cos(ang), np.sqrt(1 - mu**2) * np.sin(ang), mu], -1
        )
        v = rng.normal(size=(n, 3))
    checks = []
    c = rng.uniform(0.5, 2.0, n)
    t1 = geo.exit_time(dom, x, v, "forward")
    t2 = geo.exit_time(dom, x, c[:, None] * v, "forward")
    checks.append(("scaling", float(np.max(np.abs(t2 * c - t1) / t1)), 1e-12))
    speed = np.linalg.norm(v, axis=-1)
    checks.append(("chord-bound", float(np.max(t1 * speed) - dom.diameter), 1e-12))
    foot, tb_ = geo.boundary_foot(dom, x, v)
    on_bdry = np.abs(np.linalg.norm(foot - dom.center, axis=-1) - dom.radius)
    checks.append(("foot-on-boundary", float(np.max(on_bdry)), 1e-10 * dom.diameter))
    tau = geo.chord_time(dom, foot, v)
    checks.append(("additivity", float(np.max(np.abs(tau - (t1 + tb_)) / tau)), 1e-10))
    rows = [(name, val, tol, "PASS" if val <= tol else "FAIL") for name, val, tol in checks]
    ok = all(r[-1] == "PASS" for r in rows)
    out = os.path.join(cfg.get("output", "dir"), "geom_check.csv")
    _write_csv(out, cfg.header_lines(), ["check", "defect", "tolerance", "status"], rows)
    for r in rows:
        print(f"{r[0]:>18}: defect={r[1]:.3e} tol={r[2]:.0e} {r[3]}")
    print(f"wrote {out}")
    return ok


def cmd_chvar_check(cfg, args):
    from .boundary import maxwellian_radial
    from .measures import (
        BoundaryGrid,
        VelocityMeasure,
        phase_integral_via_boundary,
        pushforward_identity_check,
        sphere_to_boundary,
    )

    dom = cfg.domain()
    vm = VelocityMeasure(dim=2, rho_max=cfg.getfloat("grid", "speed_max"),
                         n_speed=cfg.getint("grid", "n_speed"))
    grid = BoundaryGrid(dom, cfg.getint("grid", "n_angle"), cfg.getint("grid", "n_dir"), vm)
    mw = lambda x, v: maxwellian_radial(np.sqrt(np.sum(v * v, -1)), 1.0, 2)
    rows = []
    ref = float(dom.volume)
    out_side = phase_integral_via_boundary(grid, mw, "outgoing")
    in_side = phase_integral_via_boundary(grid, mw, "incoming")
    rows.append(("phase-integral-outgoing", out_side, ref, abs(out_side - ref) / ref))
    rows.append(("phase-integral-incoming", in_side, ref, abs(in_side - ref) / ref))
    tilted = lambda z, v: (1.0 + z[..., 0] / dom.radius) * mw(z, v)
    lhs, rhs, defect = pushforward_identity_check(grid, tilted)
    rows.append(("pushforward", lhs, rhs, defect))
    x = dom.boundary_point(0.7)
    lhs, rhs, defect = sphere_to_boundary(dom, x, lambda t: 1.0 / (1.0 + t), lambda y: np.ones(y.shape[:-1]))
    rows.append(("hemisphere-to-surface", lhs, rhs, defect))
    ok = all(r[-1] <= 1e-6 for r in rows)
    out = os.path.join(cfg.get("output", "dir"), "chvar_check.csv")
    _write_csv(out, cfg.header_lines(grid.fingerprint()), ["identity", "lhs", "rhs", "defect"], rows)
    for r in rows:
        print(f"{r[0]:>26}: lhs={r[1]:.9g} rhs={r[2]:.9g} defect={r[3]:.3e}")
    print(f"wrote {out}")
    return ok


def cmd_spectral(cfg, args):
    from .boundary import KernelSpec, assemble_MlambdaH
    from .measures import BoundaryGrid, VelocityMeasure
    from .spectral import (
        closed_form_nu_prime,
        leading_eigenvalue,
        nu_prime_zero,
        nu_prime_zero_fd,
        perron_fixed_point,
        power_norm_profile,
    )

    dom = cfg.domain()
    vm = VelocityMeasure(dim=2, rho_max=cfg.getfloat("grid", "speed_max"),
                         n_speed=cfg.getint("grid", "n_speed"))
    grid = BoundaryGrid(dom, cfg.getint("grid", "n_angle"), cfg.getint("grid", "n_dir"), vm)
    spec = KernelSpec(grid, cfg.get("kernel", "type"), cfg.theta())
    per = perron_fixed_point(assemble_MlambdaH(spec, grid, 0.0))
    nu_q = nu_prime_zero(spec, grid, per)
    nu_fd = nu_prime_zero_fd(spec, grid)
    etas = np.geomspace(max(args.eta_max / 400, 0.5), args.eta_max, args.n_eta)
    prof = power_norm_profile(spec, grid, args.power, etas, method="resolved")
    mods = [abs(leading_eigenvalue(spec, grid, 1j * e).nu) for e in etas[etas <= 20]]
    mods += [np.nan] * (len(etas) - len(mods))
    rows = list(zip(etas.tolist(), prof.norms.tolist(), mods))
    out = os.path.join(cfg.get("output", "dir"), "spectral.csv")
    _write_csv(out, cfg.header_lines(grid.fingerprint()), ["eta", f"norm_power_{args.power}", "nu_modulus"], rows)
    print(f"stationary eigen derivative: quadrature={nu_q:.7f} fd={nu_fd:.7f}")
    if np.ndim(cfg.theta()) == 0:
        print(f"closed form (constant temperature): {closed_form_nu_prime(dom, float(cfg.theta())):.7f}")
    print(f"fitted norm slope over [{etas[len(etas)//2]:.3g}, {etas[-1]:.3g}]: "
          f"{prof.fitted_slope(eta_min=etas[len(etas)//2]):.3f}")
    print(f"wrote {out}")
    return True


def cmd_invariant(cfg, args):
    from .boundary import KernelSpec, assemble_MlambdaH
    from .measures import BoundaryGrid, VelocityMeasure
    from .spectral import invariant_density, invariant_trace_defect, perron_fixed_point
    from .surrogate import SurrogateSpace, aligned_phase_grid

    dom = cfg.domain()
    vm = VelocityMeasure(dim=2, rho_max=cfg.getfloat("grid", "speed_max"),
                         n_speed=cfg.getint("grid", "n_speed"))
    grid = BoundaryGrid(dom, cfg.getint("grid", "n_angle"), cfg.getint("grid", "n_dir"), vm)
    spec = KernelSpec(grid, cfg.get("kernel", "type"), cfg.theta())
    phase = aligned_phase_grid(grid, cfg.getint("phase", "n_r"),
                               cfg.getint("phase", "n_ang"), cfg.getint("phase", "n_omega"))
    space = SurrogateSpace(phase, grid, spec)
    per = perron_fixed_point(assemble_MlambdaH(spec, grid, 0.0))
    psi = invariant_density(space, per)
    trace = invariant_trace_defect(space, per)
    print(f"perron residual: {per.residual:.3e}; spectral gap: {1 - per.gap:.4f}")
    print(f"stationary mass: {np.sum(psi):.12f}; trace defect: {trace:.3e}")
    ok = per.residual <= 1e-10 and trace <= 1e-6
    if np.ndim(cfg.theta()) == 0 and float(np.ptp(np.atleast_1d(cfg.theta()))) == 0.0:
        from scipy.integrate import quad

        th = float(cfg.theta())
        p = phase
        sw = np.array([
            quad(lambda x: x / th * np.exp(-x * x / (2 * th)), a, b)[0]
            for a, b in zip(p.rho_edges[:-1], p.rho_edges[1:])
        ])
        exact = np.einsum("ra,w,l->rawl", p.pos_vol / dom.volume,
                          np.diff(p.omega_edges) / (2 * np.pi), sw / sw.sum())
        exact /= exact.sum()
        dist = float(np.abs(psi - exact).sum())
        print(f"distance to closed-form equilibrium: {dist:.3e}")
        ok = ok and dist <= 1e-3
    print("PASS" if ok else "FAIL")
    return ok


def cmd_simulate(cfg, args):
    from .transport import CompareBins, simulate

    for key, val in (("particles", args.particles), ("seed", args.seed), ("t_max", args.t_max),
                     ("record", args.record), ("init", args.init)):
        if val is not None:
            cfg.parser.set("mc", key, str(val))
    init = cfg.get("mc", "init")
    if init == "uniform-maxwell":
        init = "speed-window"
    dom = cfg.domain()
    seed = cfg.seed(required=True)
    recs = cfg.record_times()
    if init == "custom-file":
        raise SystemExit("custom-file initial data is supported through the library API")
    curve = simulate(
        dom,
        cfg.getint("mc", "particles"),
        seed,
        recs,
        init=init,
        window=cfg.window(),
        theta=float(np.atleast_1d(cfg.theta())[0]),
        n_batches=cfg.getint("mc", "batches"),
    )
    rows = []
    k_cols = curve.class_masses.shape[1]
    for i, t in enumerate(curve.times):
        rows.append((float(t), curve.values[i], curve.stderr[i], curve.raw_values[i],
                     curve.noise_floor[i], *curve.class_masses[i].tolist()))
    out = os.path.join(cfg.get("output", "dir"), "decay.csv")
    cols = ["t", "distance", "stderr", "raw_distance", "noise_floor"] + [
        f"class_{k}" for k in range(k_cols - 1)
    ] + ["class_rest"]
    _write_csv(out, cfg.header_lines(seed=seed), cols, rows)
    print(f"particles={curve.n_particles} capped_events={curve.capped_events}")
    print(f"wrote {out}")
    if getattr(args, "plot", False):
        svg = _maybe_plot(os.path.join(cfg.get("output", "dir"), "decay.svg"),
                          curve.times, [np.maximum(curve.values, 1e-12)], ["distance"],
                          "t", "weighted L1 distance", loglog=True)
        if svg:
            print(f"wrote {svg}")
    return curve.capped_events == 0


def cmd_tauberian(cfg, args):
    from .boundary import KernelSpec
    from .measures import BoundaryGrid, VelocityMeasure
    from .surrogate import SurrogateSpace, aligned_phase_grid
    from .tauberian import (
        StationaryBranch,
        TimeDomainRemainder,
        default_eta_grid,
        fourier_invert,
    )

    for key, val in (("n", args.n), ("p", args.p), ("eta_max", args.eta_max), ("t_list", args.t_list)):
        if val is not None:
            cfg.parser.set("tauberian", key, str(val))
    dom = cfg.domain()
    vm = VelocityMeasure(dim=2, rho_max=cfg.getfloat("grid", "speed_max"),
                         n_speed=cfg.getint("tauberian", "bdry_n_speed"))
    grid = BoundaryGrid(dom, cfg.getint("tauberian", "bdry_n_angle"),
                        cfg.getint("tauberian", "bdry_n_dir"), vm)
    spec = KernelSpec(grid, cfg.get("kernel", "type"), cfg.theta())
    phase = aligned_phase_grid(grid, cfg.getint("tauberian", "phase_n_r"),
                               cfg.getint("phase", "n_ang"), cfg.getint("phase", "n_omega"))
    space = SurrogateSpace(phase, grid, spec)
    p_par = cfg.getint("tauberian", "p")
    n_tail = max(cfg.getint("tauberian", "n"), 2 * p_par)
    p = phase
    lo = np.maximum(p.rho_edges[:-1], 0.5)
    hi = np.minimum(p.rho_edges[1:], 1.5)
    w1 = np.where(hi > lo, np.exp(-np.maximum(lo, 0) ** 2 / 2) - np.exp(-np.maximum(hi, lo) ** 2 / 2), 0)
    lo2 = np.maximum(p.rho_edges[:-1], 0.15)
    hi2 = np.minimum(p.rho_edges[1:], 0.5)
    w2 = np.where(hi2 > lo2, np.exp(-np.maximum(lo2, 0) ** 2 / 2) - np.exp(-np.maximum(hi2, lo2) ** 2 / 2), 0)
    base = np.einsum("ra,w->raw", p.pos_vol / dom.volume, np.full(p.n_omega, 1 / p.n_omega))
    f = np.einsum("raw,l->rawl", base, w1 / w1.sum()) - np.einsum("raw,l->rawl", base, w2 / w2.sum())
    branch = StationaryBranch(space)
    t_list = cfg.t_list()
    etas = default_eta_grid(eta_max=cfg.getfloat("tauberian", "eta_max"),
                            step=cfg.getfloat("tauberian", "eta_step"))
    inv = fourier_invert(space, n_tail, f, t_list, etas=etas, branch=branch)
    td = TimeDomainRemainder(space, f, n_tail, t_max=max(t_list) + 0.5)
    out1 = os.path.join(cfg.get("output", "dir"), "boundary_function.csv")
    _write_csv(out1, cfg.header_lines(grid.fingerprint()), ["eta", "norm", "deriv_norm"],
               list(zip(inv.sample.etas.tolist(), inv.sample.norms.tolist(), inv.sample.deriv_norms.tolist())))
    rows = []
    for q, t in enumerate(t_list):
        rem = td.remainder(t)
        direct = float(np.abs(inv.direct[q]).sum())
        bp = float(np.abs(inv.by_parts[q]).sum())
        rel = float(np.abs(inv.direct[q] - rem).sum() / max(np.abs(rem).sum(), 1e-300))
        rows.append((t, direct, bp, float(np.abs(rem).sum()), rel))
    out2 = os.path.join(cfg.get("output", "dir"), "inversion.csv")
    _write_csv(out2, cfg.header_lines(grid.fingerprint()),
               ["t", "direct", "by_parts", "time_domain", "rel_err"], rows)
    for r in rows:
        print(f"t={r[0]:g}: direct={r[1]:.6f} by_parts={r[2]:.6f} time={r[3]:.6f} rel={r[4]:.4f}")
    print(f"hermitian defect: {inv.hermitian_defect:.2e}; tail fraction: {inv.sample.tail_fraction():.2e}")
    print(f"wrote {out1}\nwrote {out2}")
    return all(r[4] <= 0.05 or r[3] < 1e-6 for r in rows)


def cmd_report(cfg, args):
    from .acceptance import run_acceptance

    results = run_acceptance(cfg, fast=args.fast)
    out = os.path.join(cfg.get("output", "dir"), "acceptance.csv")
    rows = [(r.name, "PASS" if r.passed else "FAIL", r.detail, f"{r.elapsed:.1f}") for r in results]
    _write_csv(out, cfg.header_lines(), ["criterion", "status", "detail", "seconds"], rows)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}} {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    n_fail = sum(not r.passed for r in results)
    print(f"\n{len(results) - n_fail}/{len(results)} criteria passed; wrote {out}")
    if n_fail:
        print("failing:", ", ".join(r.name for r in results if not r.passed))
    return n_fail == 0


def main(argv=None):
    ap = _build_parser()
    args = ap.parse_args(argv)
    try:
        cfg = _config_from_args(args)
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    apply_thread_limit()
    os.makedirs(cfg.get("output", "dir"), exist_ok=True)
    handlers = {
        "geom-check": cmd_geom_check,
        "chvar-check": cmd_chvar_check,
        "spectral": cmd_spectral,
        "invariant": cmd_invariant,
        "simulate": cmd_simulate,
        "tauberian": cmd_tauberian,
        "report": cmd_report,
    }
    ok = handlers[args.command](cfg, args)
    return 0 if ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
