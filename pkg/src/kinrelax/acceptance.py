"""Acceptance suite: one callable per criterion, shared heavy fixtures.

Each check returns (name, passed, detail).  Tolerances are fixed here and
mirror the package-level contracts; the Monte Carlo checks pin their seeds
so the suite is deterministic.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .boundary import (
    KernelSpec,
    assemble_MlambdaH,
    maxwellian_radial,
    small_velocity_split,
    weighted_norms,
)
from .geometry import Domain
from .measures import (
    BoundaryGrid,
    VelocityMeasure,
    direct_phase_integral,
    jacobian,
    phase_integral_via_boundary,
    pushforward_identity_check,
    sphere_to_boundary,
)
from .spectral import (
    invariant_density,
    leading_eigenvalue,
    nu_prime_zero,
    nu_prime_zero_fd,
    perron_fixed_point,
    power_norm_profile,
)
from .surrogate import SurrogateSpace, aligned_phase_grid
from .tauberian import (
    ResolventBundle,
    StationaryBranch,
    TimeDomainRemainder,
    default_eta_grid,
    fourier_invert,
    phi_eta,
    resolvent_full,
)
from .transport import (
    CompareBins,
    InsufficientSignalError,
    bounce_mass_quadrature,
    fit_rate,
    free_survival,
    simulate,
    window_speed_density,
)

SEED = 20260810


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    elapsed: float = 0.0


class Fixtures:
    """Lazily built shared grids and operators (canonical configuration)."""

    def __init__(self, fast=False):
        self.fast = fast
        self.domain = Domain(dim=2)
        self._cache = {}

    def canonical_grid(self):
        if "grid" not in self._cache:
            vm = VelocityMeasure(dim=2, rho_max=8.0, n_speed=48)
            self._cache["grid"] = BoundaryGrid(self.domain, 64, 32, vm)
        return self._cache["grid"]

    def canonical_spec(self):
        if "spec" not in self._cache:
            self._cache["spec"] = KernelSpec(self.canonical_grid(), "maxwell", 1.0)
        return self._cache["spec"]

    def perron(self):
        if "perron" not in self._cache:
            self._cache["perron"] = perron_fixed_point(
                assemble_MlambdaH(self.canonical_spec(), self.canonical_grid(), 0.0)
            )
        return self._cache["perron"]

    def canonical_space(self):
        if "space" not in self._cache:
            grid = self.canonical_grid()
            phase = aligned_phase_grid(grid, n_r=16, n_ang=32, n_omega=32)
            self._cache["space"] = SurrogateSpace(phase, grid, self.canonical_spec())
        return self._cache["space"]

    def tauberian_space(self):
        if "tspace" not in self._cache:
            vm = VelocityMeasure(dim=2, rho_max=8.0, n_speed=32)
            grid = BoundaryGrid(self.domain, 32, 16, vm)
            spec = KernelSpec(grid, "maxwell", 1.0)
            phase = aligned_phase_grid(grid, n_r=12, n_ang=32, n_omega=32)
            self._cache["tspace"] = SurrogateSpace(phase, grid, spec)
        return self._cache["tspace"]

    def zero_mean_datum(self, space):
        p = space.phase

        def win(a, b):
            lo = np.maximum(p.rho_edges[:-1], a)
            hi = np.minimum(p.rho_edges[1:], b)
            w = np.where(
                hi > lo,
                np.exp(-np.maximum(lo, 0) ** 2 / 2) - np.exp(-np.maximum(hi, lo) ** 2 / 2),
                0.0,
            )
            return np.einsum(
                "ra,w,l->rawl",
                p.pos_vol / self.domain.volume,
                np.full(p.n_omega, 1 / p.n_omega),
                w / w.sum(),
            )

        return win(0.5, 1.5) - win(0.15, 0.5)

    def particles(self, n):
        return n // 20 if self.fast else n

    def decay_run(self):
        if "decay" not in self._cache:
            recs = sorted(set(np.geomspace(20.0, 200.0, 24)))
            self._cache["decay"] = simulate(
                self.domain,
                self.particles(10_000_000),
                SEED,
                recs,
                init="speed-window",
                window=(0.005, 0.4),
                k_max=8,
            )
        return self._cache["decay"]


def maxwellian_phase(x, v):
    return maxwellian_radial(np.sqrt(np.sum(np.asarray(v, float) ** 2, -1)), 1.0, 2)


def check_integration_identities(fx: Fixtures) -> CheckResult:
    grid = fx.canonical_grid()
    out = phase_integral_via_boundary(grid, maxwellian_phase, "outgoing")
    inc = phase_integral_via_boundary(grid, maxwellian_phase, "incoming")
    ref = direct_phase_integral(fx.domain, grid.measure, maxwellian_phase)
    d1 = abs(out - ref) / ref
    d2 = abs(inc - ref) / ref
    tilt = lambda z, v: (1.0 + z[..., 0]) * maxwellian_phase(z, v)
    _, _, d3 = pushforward_identity_check(grid, tilt)
    ok = max(d1, d2, d3) <= 1e-6
    return CheckResult(
        "01 integration identities",
        ok,
        f"phase defects {d1:.1e}/{d2:.1e}, pushforward {d3:.1e} (tol 1e-6)",
    )


def check_change_of_variables(fx: Fixtures) -> CheckResult:
    x = fx.domain.boundary_point(0.3)
    one = lambda t: np.ones(np.shape(t))
    lhs, rhs, _ = sphere_to_boundary(fx.domain, x, one, lambda y: np.ones(y.shape[:-1]))
    d_circle = max(abs(lhs - 2.0), abs(rhs - 2.0))
    ball = Domain(dim=3)
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(40, 3))
    pts /= np.linalg.norm(pts, axis=-1, keepdims=True)
    J = jacobian(ball, pts[:20], pts[20:])
    d_sphere = float(np.max(np.abs(J - 0.25)))
    ok = d_circle <= 1e-6 and d_sphere <= 1e-12
    return CheckResult(
        "02 hemisphere-to-surface change of variables",
        ok,
        f"circle both sides 2 within {d_circle:.1e}, sphere transfer 1/4 within {d_sphere:.1e}",
    )


def check_stochasticity(fx: Fixtures) -> CheckResult:
    spec = fx.canonical_spec()
    d_h = spec.normalization_defect()
    op = assemble_MlambdaH(spec, fx.canonical_grid(), 0.0)
    d_m = op.stochasticity_defect()
    gamma_err = float(np.max(np.abs(spec.gamma - spec.analytic_gamma())))
    ok = d_h <= 1e-8 and d_m <= 1e-8
    return CheckResult(
        "03 wall stochasticity",
        ok,
        f"wall mass defect {d_h:.1e}, transfer column defect {d_m:.1e} (tol 1e-8); "
        f"grid normalization vs closed form {gamma_err:.1e}",
    )


def check_invariant_density(fx: Fixtures) -> CheckResult:
    from scipy.integrate import quad

    space = fx.canonical_space()
    psi = invariant_density(space, fx.perron())
    p = space.phase
    sw = np.array(
        [
            quad(lambda x: x * np.exp(-x * x / 2), a, b)[0]
            for a, b in zip(p.rho_edges[:-1], p.rho_edges[1:])
        ]
    )
    exact = np.einsum(
        "ra,w,l->rawl",
        p.pos_vol / np.pi,
        np.diff(p.omega_edges) / (2 * np.pi),
        sw / sw.sum(),
    )
    exact /= exact.sum()
    dist = float(np.abs(psi - exact).sum())
    mass = float(np.sum(psi))
    ok = dist <= 1e-3 and abs(mass - 1.0) <= 1e-12
    return CheckResult(
        "04 invariant density",
        ok,
        f"distance to Maxwellian/area {dist:.2e} (tol 1e-3), mass {mass:.12f}",
    )


def check_eigenvalue_derivative(fx: Fixtures) -> CheckResult:
    spec, grid = fx.canonical_spec(), fx.canonical_grid()
    formula = nu_prime_zero(spec, grid, fx.perron())
    target = -np.sqrt(2 * np.pi) / 2
    fd = nu_prime_zero_fd(spec, grid)
    d_closed = abs(formula - target) / abs(target)
    d_fd = abs(fd - formula) / abs(formula)
    ok = d_closed <= 1e-3 and d_fd <= 1e-4
    return CheckResult(
        "05 stationary eigenvalue derivative",
        ok,
        f"quadrature {formula:.7f} vs closed form {target:.7f} ({d_closed:.1e}); "
        f"finite difference off by {d_fd:.1e}",
    )


def check_axis_spectral_margin(fx: Fixtures) -> CheckResult:
    spec, grid = fx.canonical_spec(), fx.canonical_grid()
    mods = {eta: abs(leading_eigenvalue(spec, grid, 1j * eta).nu) for eta in (0.5, 1.0, 5.0)}
    worst = max(mods.values())
    ok = worst <= 0.99
    detail = ", ".join(f"|nu({e}i)|={m:.4f}" for e, m in mods.items())
    return CheckResult("06 spectral margin on the axis", ok, detail + " (need <= 0.99)")


def check_power_norm_decay(fx: Fixtures) -> CheckResult:
    spec, grid = fx.canonical_spec(), fx.canonical_grid()
    etas = np.geomspace(5.0, 200.0, 14)
    prof = power_norm_profile(spec, grid, 2, etas, method="resolved")
    slope = prof.fitted_slope()
    tail_once = prof.tail_integral(50.0)
    tail_twice = prof.tail_integral(100.0)
    ok = slope <= -0.9 and tail_twice < tail_once
    return CheckResult(
        "07 squared-transfer norm decay",
        ok,
        f"log-log slope {slope:.2f} (need <= -0.9); tail integral {tail_once:.2e} -> {tail_twice:.2e}",
    )


def check_free_flow_decay(fx: Fixtures) -> CheckResult:
    D = fx.domain.diameter
    densities = [window_speed_density(0.5, 1.5), window_speed_density(0.1, 2.0)]
    worst = 0.0
    for sd in densities:
        norm_k = {}
        for k in (0, 1, 2):
            val, _ = __import__("scipy.integrate", fromlist=["quad"]).quad(
                lambda r: sd(r) * max(1.0, r ** -k if r > 0 else np.inf), 0.01, 8.0, limit=200
            )
            norm_k[k] = val
        for k in (1, 2):
            for t in (1.0, 2.0, 5.0, 10.0):
                lhs = t**k * free_survival(t, sd)
                bound = D**k * norm_k[k] * 1.05
                worst = max(worst, lhs / bound)
    # time integral of the free-flow norm vs the inverse-speed bound
    sd = densities[0]
    ts = np.concatenate([[0.0], np.geomspace(1e-3, 40.0, 220)])
    vals = np.array([free_survival(t, sd) for t in ts])
    integral = float(np.trapezoid(vals, ts))
    bound1 = D * __import__("scipy.integrate", fromlist=["quad"]).quad(
        lambda r: sd(r) * max(1.0, 1.0 / r), 0.01, 8.0
    )[0]
    ok = worst <= 1.0 and integral <= bound1 * 1.05
    return CheckResult(
        "08 free-flow decay bounds",
        ok,
        f"worst bound ratio {worst:.3f} (need <= 1); time integral {integral:.4f} <= {bound1:.4f} * 1.05",
    )


def check_small_velocity_split(fx: Fixtures) -> CheckResult:
    vm = VelocityMeasure(dim=2, rho_max=8.0, n_speed=96, n_small_panels=12)
    grid = BoundaryGrid(fx.domain, 16, 16, vm)
    spec = KernelSpec(grid, "maxwell", 1.0)
    deltas = np.array([0.05, 0.1, 0.2, 0.4])
    wn = weighted_norms(fx.canonical_spec(), refine_check=False)
    y1 = []
    bound_ok = True
    for d in deltas:
        sp = small_velocity_split(spec, d)
        y1.append(sp.norm_below(1))
        sp_c = small_velocity_split(fx.canonical_spec(), d)
        for k in range(wn.n_gain + 1):
            bound_ok &= sp_c.norm_below(0) <= wn.norms[k] * d ** (k + 1) * (1 + 1e-12)
    slope = float(np.polyfit(np.log(deltas), np.log(y1), 1)[0])
    ok = abs(slope - 2.0) <= 0.05 and bound_ok and wn.n_gain == 1
    return CheckResult(
        "09 small-velocity split scaling",
        ok,
        f"first-weighted norm slope {slope:.3f} (need 2 +- 0.05), gain order {wn.n_gain}, "
        f"plain-norm bounds {'hold' if bound_ok else 'fail'}",
    )


def check_main_decay_rate(fx: Fixtures) -> CheckResult:
    curve = fx.decay_run()
    try:
        fit = fit_rate(curve.times, curve.values, curve.stderr, window=(20.0, 200.0))
        slope, ci = fit.slope, fit.ci_halfwidth
        fitted = f"slope {slope:.2f} +- {ci:.2f} over t in [{fit.window[0]:.0f}, {fit.window[1]:.0f}] ({fit.n_points} pts)"
        slope_ok = slope <= -0.9 and ci <= 0.15
    except InsufficientSignalError as exc:
        fitted = f"no significant points ({exc})"
        slope_ok = False
    null = simulate(
        fx.domain,
        fx.particles(2_000_000),
        SEED + 1,
        [20.0, 50.0, 200.0],
        init="equilibrium",
    )
    null_ok = bool(np.all(np.abs(null.values) <= 3 * null.stderr))
    ok = slope_ok and null_ok and curve.capped_events == 0
    return CheckResult(
        "10 relaxation rate bound",
        ok,
        fitted + f"; equilibrium null within 3 sigma: {null_ok}; capped events {curve.capped_events}",
    )


def check_partial_sum_decay(fx: Fixtures) -> CheckResult:
    curve = fx.decay_run()
    cum = curve.class_masses[:, :4].sum(axis=1)
    se = np.sqrt(np.maximum(cum, 1e-12) / curve.n_particles)
    fit = fit_rate(curve.times, cum, se, window=(20.0, 200.0), signal_factor=5.0)
    ok = fit.slope <= -1.8
    return CheckResult(
        "11 low-bounce-class decay",
        ok,
        f"cumulative classes<=3 slope {fit.slope:.2f} +- {fit.ci_halfwidth:.2f} (need <= -1.8)",
    )


def check_first_bounce_class(fx: Fixtures) -> CheckResult:
    curve = fx._cache.get("short")
    if curve is None:
        curve = simulate(
            fx.domain,
            fx.particles(10_000_000),
            SEED + 2,
            [0.5, 1.0, 2.0],
            init="speed-window",
            window=(0.5, 1.5),
            k_max=4,
        )
        fx._cache["short"] = curve
    sd = window_speed_density(0.5, 1.5)
    worst_line = []
    ok = True
    for i, t in enumerate(curve.times):
        mc = curve.class_masses[i, 1]
        se = np.sqrt(mc * (1 - mc) / curve.n_particles)
        qd = bounce_mass_quadrature(float(t), 1, sd)
        tol = 3 * se + 0.01 * qd
        ok &= abs(mc - qd) <= tol
        worst_line.append(f"t={t:g}: {abs(mc - qd):.1e}<= {tol:.1e}")
    return CheckResult("12 first-bounce cross-validation", bool(ok), "; ".join(worst_line))


def check_laplace_duality(fx: Fixtures) -> CheckResult:
    # one wall interaction leaves fine angular structure: use a refined
    # surrogate; the exact chord-transform source removes first-flight bias
    vm = VelocityMeasure(dim=2, rho_max=8.0, n_speed=48)
    grid = BoundaryGrid(fx.domain, 128, 64, vm)
    spec = KernelSpec(grid, "maxwell", 1.0)
    phase = aligned_phase_grid(grid, n_r=32, n_ang=64, n_omega=64)
    space = SurrogateSpace(phase, grid, spec)
    p = phase
    lam = 1.0
    from .transport import laplace_first_arrival

    sd = window_speed_density(0.5, 1.5)
    total = laplace_first_arrival(lam, sd)
    F0 = np.full(space.grid.n_angle, total / space.grid.n_angle)
    K = space.flux_matrix(lam)
    freq = space.lift_departures(K @ F0, lam).real
    bins = CompareBins(fx.domain)
    freq_binned = bins.bin_phase_masses(p, freq)
    dt_rec = 0.25
    recs = np.arange(dt_rec, 40.0 + dt_rec / 2, dt_rec)
    curve, class_hist = simulate(
        fx.domain,
        fx.particles(10_000_000),
        SEED + 3,
        recs.tolist(),
        init="speed-window",
        window=(0.5, 1.5),
        k_max=4,
        class_hist_upto=2,
    )
    w = np.full(len(recs), dt_rec)
    w[-1] *= 0.5
    time_side = np.einsum("r,rb->b", w * np.exp(-lam * recs), class_hist[:, 2, :])
    rel = float(np.abs(freq_binned - time_side).sum() / np.abs(time_side).sum())
    ok = rel <= 0.02
    return CheckResult(
        "13 bounce-resolved transform duality",
        ok,
        f"relative weighted-L1 difference {rel:.4f} (tol 0.02)",
    )


def check_resolvent_series(fx: Fixtures) -> CheckResult:
    space = fx.tauberian_space()
    f = fx.zero_mean_datum(space)
    a = resolvent_full(space, f, 1.0, via="solve")
    b = resolvent_full(space, f, 1.0, via="series", terms=200)
    diff = float(np.abs(a - b).sum())
    ok = diff <= 1e-9
    return CheckResult(
        "14 resolvent series identity", ok, f"solved vs 200-term series differ by {diff:.1e} (tol 1e-9)"
    )


def check_fourier_inversion(fx: Fixtures) -> CheckResult:
    space = fx.tauberian_space()
    f = fx.zero_mean_datum(space)
    branch = StationaryBranch(space)
    n_tail = 6
    t_list = [0.05, 1.0, 5.0, 10.0]
    inv = fourier_invert(space, n_tail, f, t_list, branch=branch)
    td = TimeDomainRemainder(space, f, n_tail, t_max=10.5, dt=0.005)
    floor = float(np.abs(inv.direct[0]).sum())  # truncation level near t=0
    details = [f"truncation floor {floor:.1e}"]
    ok = True
    for q, t in ((1, 1.0), (2, 5.0), (3, 10.0)):
        rem = td.remainder(t)
        err = float(np.abs(inv.direct[q] - rem).sum())
        scale = float(np.abs(rem).sum())
        this_ok = err <= max(0.05 * scale, 3 * floor)
        ok &= this_ok
        details.append(f"t={t:g}: err {err:.2e} vs 5% of {scale:.2e}")
    bp = float(np.abs(inv.by_parts[3] - inv.direct[3]).sum() / np.abs(inv.direct[3]).sum())
    ok &= bp <= 0.01
    details.append(f"by-parts vs direct at t=10: {bp:.2e} (tol 1e-2)")
    phi0 = phi_eta(space, f, 0.0, branch)
    phim = phi_eta(space, f, 1e-3, branch)
    jump = float(np.abs(phim - phi0).sum() / np.abs(phi0).sum())
    ok &= jump <= 1e-2
    details.append(f"zero-frequency branch jump {jump:.2e} (tol 1e-2)")
    return CheckResult("15 oscillatory inversion", bool(ok), "; ".join(details))


ALL_CHECKS = [
    check_integration_identities,
    check_change_of_variables,
    check_stochasticity,
    check_invariant_density,
    check_eigenvalue_derivative,
    check_axis_spectral_margin,
    check_power_norm_decay,
    check_free_flow_decay,
    check_small_velocity_split,
    check_main_decay_rate,
    check_partial_sum_decay,
    check_first_bounce_class,
    check_laplace_duality,
    check_resolvent_series,
    check_fourier_inversion,
]


def run_acceptance(cfg=None, fast=False):
    fx = Fixtures(fast=fast)
    results = []
    for check in ALL_CHECKS:
        t0 = time.time()
        try:
            res = check(fx)
        except Exception as exc:  # a crashed criterion is a failed criterion
            res = CheckResult(check.__name__, False, f"error: {exc!r}")
        res.elapsed = time.time() - t0
        results.append(res)
    return results
