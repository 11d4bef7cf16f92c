import numpy as np
import pytest

from kinrelax.boundary import KernelSpec, ParameterError
from kinrelax.geometry import Domain
from kinrelax.measures import BoundaryGrid, VelocityMeasure
from kinrelax.surrogate import SurrogateSpace, aligned_phase_grid
from kinrelax.tauberian import (
    RemainderChain,
    StationaryBranch,
    ZeroMeanRequiredError,
    default_eta_grid,
    fourier_invert,
    phi_eta,
    psi_n_profile,
    resolvent_full,
    theta_modulus,
    upsilon_n,
    TimeDomainRemainder,
)

DISK = Domain(dim=2)


@pytest.fixture(scope="module")
def space():
    grid = BoundaryGrid(DISK, 24, 16, measure=VelocityMeasure(dim=2, rho_max=8.0, n_speed=24))
    spec = KernelSpec(grid, "maxwell", 1.0)
    phase = aligned_phase_grid(grid, n_r=8, n_ang=24, n_omega=24)
    return SurrogateSpace(phase, grid, spec)


def window_masses(space, a, b):
    p = space.phase
    lo = np.maximum(p.rho_edges[:-1], a)
    hi = np.minimum(p.rho_edges[1:], b)
    w = np.where(hi > lo, np.exp(-np.maximum(lo, 0) ** 2 / 2) - np.exp(-np.maximum(hi, lo) ** 2 / 2), 0.0)
    sw = w / w.sum()
    return np.einsum("ra,w,l->rawl", p.pos_vol / np.pi, np.full(p.n_omega, 1 / p.n_omega), sw)


@pytest.fixture(scope="module")
def f_zero_mean(space):
    return window_masses(space, 0.5, 1.5) - window_masses(space, 0.15, 0.5)


@pytest.fixture(scope="module")
def branch(space):
    return StationaryBranch(space)


def test_resolvent_solved_vs_series(space, f_zero_mean):
    a = resolvent_full(space, f_zero_mean, 1.0, via="solve")
    b = resolvent_full(space, f_zero_mean, 1.0, via="series", terms=200)
    assert np.abs(a - b).sum() <= 1e-9


def test_resolvent_mass_identity(space):
    g = window_masses(space, 0.5, 1.5)
    for lam in (0.5, 1.0, 2.0):
        r = resolvent_full(space, g, lam)
        assert np.sum(r).real == pytest.approx(np.sum(g) / lam, rel=1e-12)


def test_resolvent_preserves_zero_mean(space, f_zero_mean):
    r = resolvent_full(space, f_zero_mean, 1.0)
    assert abs(np.sum(r)) <= 1e-12


def test_upsilon_zero_input(space):
    out = upsilon_n(space, 2, np.zeros(space.phase.shape), 1.0)
    assert np.all(out == 0)


def test_upsilon_series_vs_difference(space, f_zero_mean):
    for lam, n in ((1.0, 0), (1.0, 3), (0.5 + 3.0j, 2)):
        a = upsilon_n(space, n, f_zero_mean, lam, form="series")
        b = upsilon_n(space, n, f_zero_mean, lam, form="difference")
        assert np.abs(a - b).sum() <= 1e-9


def test_upsilon_norm_bound(space, f_zero_mean):
    # geometric tail: submultiplicativity of the solved chain
    lam = 0.5 + 3.0j
    u2 = np.abs(upsilon_n(space, 2, f_zero_mean, lam)).sum()
    u0 = np.abs(upsilon_n(space, 0, f_zero_mean, lam)).sum()
    K = space.flux_matrix(lam)
    contraction = np.linalg.norm(K, 1)
    assert u2 <= u0 * contraction**2 * (1 + 1e-9) + 1e-12


def test_phi_eta_direct_solve(space, f_zero_mean):
    eta = 5.0
    phi = phi_eta(space, f_zero_mean, eta)
    K = space.flux_matrix(1j * eta)
    F0 = space.flux_source(f_zero_mean, 1j * eta)
    ref = np.linalg.solve(np.eye(K.shape[0]) - K, F0)
    assert np.allclose(phi, ref, rtol=1e-12)


def test_phi_eta_requires_zero_mean_at_origin(space):
    g = window_masses(space, 0.5, 1.5)
    with pytest.raises(ZeroMeanRequiredError):
        phi_eta(space, g, 0.0)


def test_stationary_projection_kills_source(space, f_zero_mean, branch):
    # total flux of the arrival source vanishes for zero-mean data, so the
    # stationary projection of it is exactly zero
    F0 = space.flux_source(f_zero_mean, 0.0).real
    assert abs(np.sum(F0)) <= 1e-12
    assert np.max(np.abs(branch.P0 @ F0)) <= 1e-12


def test_phi_eta_continuity_across_zero(space, f_zero_mean, branch):
    phi0 = phi_eta(space, f_zero_mean, 0.0, branch)
    phi_eps = phi_eta(space, f_zero_mean, 1e-3, branch)
    jump = np.abs(phi_eps - phi0).sum() / np.abs(phi0).sum()
    assert jump <= 1e-2


def test_phi_eta_richardson_limit(space, f_zero_mean, branch):
    phi0 = phi_eta(space, f_zero_mean, 0.0, branch)

    def phi_real(eps):
        K = space.flux_matrix(eps)
        F0 = space.flux_source(f_zero_mean, eps)
        return np.linalg.solve(np.eye(K.shape[0]) - K, F0).real

    p1, p2 = phi_real(1e-2), phi_real(1e-3)
    rich = (10 * p2 - p1) / 9
    assert np.abs(rich - phi0).sum() / np.abs(phi0).sum() <= 1e-3


def test_boundary_function_hermitian(space, f_zero_mean):
    chain = RemainderChain(space, 3, f_zero_mean)
    assert chain.hermitian_defect(2.0) <= 1e-12


def test_psi_profile_and_derivative_fd(space, f_zero_mean, branch):
    chain = RemainderChain(space, 3, f_zero_mean, branch)
    rng = np.random.default_rng(0)
    for eta in rng.uniform(0.3, 8.0, 6):
        psi, dpsi = chain.boundary_function(eta)
        h = 1e-5
        pp, _ = chain.boundary_function(eta + h, want_deriv=False)
        pm, _ = chain.boundary_function(eta - h, want_deriv=False)
        fd = (pp - pm) / (2 * h)
        rel = np.sum(np.abs(dpsi - fd)) / np.sum(np.abs(dpsi))
        assert rel <= 1e-3


def test_psi_profile_record(space, f_zero_mean, branch):
    etas = default_eta_grid(eta_max=12.0, step=0.2)
    sample = psi_n_profile(space, 4, f_zero_mean, etas, branch, theta_every=8)
    assert sample.zero_mean
    assert sample.tail_fraction() <= 1e-3
    # profile decays: the far tail is below a tenth of the peak
    mid = np.searchsorted(sample.etas, 6.0)
    assert np.max(sample.norms[mid:]) <= 0.1 * sample.peak()
    mods = theta_modulus(sample, [0.0, 0.5, 2.0])
    assert mods[0] == 0.0
    assert np.all(np.diff(mods) >= 0)


def test_fourier_inversion_against_marching(space, f_zero_mean, branch):
    n_tail = 4
    etas = default_eta_grid(eta_max=20.0)
    inv = fourier_invert(space, n_tail, f_zero_mean, [0.05, 3.0, 6.0], etas=etas, branch=branch)
    assert inv.hermitian_defect <= 1e-12
    td = TimeDomainRemainder(space, f_zero_mean, n_tail, t_max=6.5, dt=0.005)
    floor = np.abs(inv.direct[0]).sum()  # truncation level probed near t=0
    for q, t in ((1, 3.0), (2, 6.0)):
        rem = td.remainder(t)
        err = np.abs(inv.direct[q] - rem).sum()
        assert err <= max(0.05 * np.abs(rem).sum(), 3 * floor)
    # integrated-by-parts form agrees with the direct one away from zero
    bp = np.abs(inv.by_parts[2] - inv.direct[2]).sum() / np.abs(inv.direct[2]).sum()
    assert bp <= 1e-2


def test_upsilon_matches_laplace_of_marching(space, f_zero_mean):
    # frequency-side chain equals the time quadrature of the remainder
    lam = 1.0
    n_tail = 1
    ups = upsilon_n(space, n_tail, f_zero_mean, lam).real
    td = TimeDomainRemainder(space, f_zero_mean, n_tail, t_max=40.0, dt=0.01)
    ts = np.linspace(0.0, 40.0, 401)
    acc = np.zeros(space.phase.shape)
    for i, t in enumerate(ts):
        w = (ts[1] - ts[0]) * (0.5 if i in (0, len(ts) - 1) else 1.0)
        acc += w * np.exp(-lam * t) * td.remainder(t)
    assert np.abs(acc - ups).sum() / np.abs(ups).sum() <= 0.02
