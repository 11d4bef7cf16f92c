import numpy as np
import pytest
from scipy.integrate import quad

from kinrelax.boundary import KernelSpec, assemble_MlambdaH
from kinrelax.geometry import Domain
from kinrelax.measures import BoundaryGrid, VelocityMeasure
from kinrelax.spectral import (
    closed_form_nu_prime,
    eigenprojection,
    invariant_density,
    invariant_trace_defect,
    leading_eigenvalue,
    left_eigenvector_defect,
    nu_prime_zero,
    nu_prime_zero_fd,
    perron_fixed_point,
    power_norm_profile,
    resolved_nu_modes,
    speed_transform,
)
from kinrelax.surrogate import SurrogateSpace, aligned_phase_grid

DISK = Domain(dim=2)


@pytest.fixture(scope="module")
def grid():
    return BoundaryGrid(DISK, 64, 32, measure=VelocityMeasure(dim=2, rho_max=8.0, n_speed=48))


@pytest.fixture(scope="module")
def spec(grid):
    return KernelSpec(grid, "maxwell", 1.0)


@pytest.fixture(scope="module")
def perron(spec, grid):
    return perron_fixed_point(assemble_MlambdaH(spec, grid, 0.0))


@pytest.fixture(scope="module")
def space(spec, grid):
    phase = aligned_phase_grid(grid, n_r=16, n_ang=32, n_omega=32)
    return SurrogateSpace(phase, grid, spec)


def test_perron_fixed_point(spec, grid, perron):
    assert perron.residual <= 1e-10
    assert np.all(perron.phi0 > 0)
    assert np.sum(perron.phi0) == pytest.approx(1.0, rel=1e-12)
    assert perron.gap < 1.0
    # constant-temperature disk: stationary flux is uniform over nodes
    assert np.ptp(perron.flux) <= 1e-12
    # cell values reproduce the wall Maxwellian over the speed nodes
    vals = perron.phi0 / grid.weights
    gamma = 1 / np.sqrt(2 * np.pi)
    expected = np.exp(-grid.measure.nodes ** 2 / 2) / (2 * np.pi) / (2 * np.pi * gamma)
    assert np.allclose(vals, expected[None, None, :], rtol=1e-7)


def test_left_eigenvector_is_one(spec, grid):
    assert left_eigenvector_defect(assemble_MlambdaH(spec, grid, 0.0)) <= 1e-12


def test_perron_varying_temperature(grid):
    theta = 1.0 + 0.5 * np.cos(grid.alphas)
    sp = KernelSpec(grid, "maxwell", theta)
    per = perron_fixed_point(assemble_MlambdaH(sp, grid, 0.0))
    assert per.residual <= 1e-10
    assert np.all(per.phi0 > 0)
    # dense eigensolve agrees with the iterated flux vector
    K = assemble_MlambdaH(sp, grid, 0.0).flux_matrix.real
    vals, vecs = np.linalg.eig(K)
    lead = vecs[:, np.argmax(vals.real)].real
    lead /= lead.sum()
    assert np.allclose(lead, per.flux, atol=1e-10)


def test_invariant_density_matches_equilibrium(space, perron):
    psi = invariant_density(space, perron)
    assert np.sum(psi) == pytest.approx(1.0, abs=1e-12)
    assert np.all(psi >= 0)
    p = space.phase
    exact_speed = np.array(
        [
            quad(lambda x: x * np.exp(-x * x / 2), a, b)[0]
            for a, b in zip(p.rho_edges[:-1], p.rho_edges[1:])
        ]
    )
    exact = np.einsum(
        "ra,w,l->rawl",
        p.pos_vol / np.pi,
        np.diff(p.omega_edges) / (2 * np.pi),
        exact_speed / exact_speed.sum(),
    )
    exact /= exact.sum()
    assert np.abs(psi - exact).sum() <= 1e-3
    assert invariant_trace_defect(space, perron) <= 1e-6


def test_invariant_density_weighted_norms(space, perron):
    # one inverse-speed order is integrable, two are not (planar wall law)
    psi = invariant_density(space, perron)
    assert np.isfinite(space.phase.x_norm(psi, 1))
    assert space.phase.x_norm(psi, 2) == np.inf


def test_leading_eigenvalue_limits(spec, grid):
    e0 = leading_eigenvalue(spec, grid, 0.0)
    assert e0.nu == pytest.approx(1.0, abs=1e-12)
    assert e0.residual <= 1e-9
    e_real = leading_eigenvalue(spec, grid, 0.1)
    assert abs(e_real.nu.imag) <= 1e-10
    assert 0.0 < e_real.nu.real < 1.0
    e_imag = leading_eigenvalue(spec, grid, 0.5j)
    assert abs(e_imag.nu) < 1.0
    assert e_imag.simple


def test_spectral_radius_margin_on_axis(spec, grid):
    for eta in (0.5, 1.0, 5.0):
        e = leading_eigenvalue(spec, grid, 1j * eta)
        assert abs(e.nu) <= 0.99


def test_nu_continuity_along_axis(spec, grid):
    etas = np.linspace(0.0, 2.0, 21)
    mods = [abs(leading_eigenvalue(spec, grid, 1j * e).nu) for e in etas]
    assert np.max(np.abs(np.diff(mods))) < 0.05


def test_eigenprojection_idempotent(spec, grid):
    for lam in (0.05, 0.02 + 0.03j):
        P = eigenprojection(spec, grid, lam)
        assert np.max(np.abs(P @ P - P)) <= 1e-10
        K = assemble_MlambdaH(spec, grid, lam).flux_matrix
        assert np.max(np.abs(P @ K - K @ P)) <= 1e-9


def test_nu_prime_zero_closed_form(spec, grid, perron):
    formula = nu_prime_zero(spec, grid, perron)
    assert formula == pytest.approx(-np.sqrt(2 * np.pi) / 2, rel=1e-3)
    assert closed_form_nu_prime(DISK) == pytest.approx(-1.2533141373155, rel=1e-12)
    fd = nu_prime_zero_fd(spec, grid)
    assert abs(fd - formula) / abs(formula) <= 1e-4


def test_nu_prime_scales_with_radius():
    big = Domain(dim=2, radius=2.0)
    g = BoundaryGrid(big, 64, 32, measure=VelocityMeasure(dim=2, rho_max=8.0, n_speed=48))
    sp = KernelSpec(g, "maxwell", 1.0)
    per = perron_fixed_point(assemble_MlambdaH(sp, g, 0.0))
    assert nu_prime_zero(sp, g, per) == pytest.approx(-np.sqrt(2 * np.pi), rel=1e-3)


def test_power_norms_basics(spec, grid):
    prof = power_norm_profile(spec, grid, 2, [0.0, 0.5, 1.0], method="deposition")
    assert prof.norms[0] == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(prof.norms) < 0)
    op = assemble_MlambdaH(spec, grid, 2.0j)
    assert op.mu_norm(3) <= op.mu_norm(2) + 1e-12


def test_power_norm_resolved_matches_deposition_at_low_frequency(spec, grid):
    dep = power_norm_profile(spec, grid, 2, [0.5, 1.0], method="deposition")
    res = power_norm_profile(spec, grid, 2, [0.5, 1.0], method="resolved")
    assert np.allclose(dep.norms, res.norms, rtol=5e-3)


def test_power_norm_resolved_slope(spec, grid):
    etas = np.geomspace(5.0, 200.0, 12)
    prof = power_norm_profile(spec, grid, 2, etas, method="resolved")
    assert prof.fitted_slope() <= -0.9
    # tail integral decreases when the window doubles
    assert prof.tail_integral(20.0) < prof.tail_integral(10.0)


def test_resolved_modes_match_dense_eig(spec, grid):
    S = speed_transform(spec, w_max=60.0)
    for eta in (0.5, 1.0):
        _, modes = resolved_nu_modes(spec, S, eta)
        dense = abs(leading_eigenvalue(spec, grid, 1j * eta).nu)
        assert np.max(np.abs(modes)) == pytest.approx(dense, abs=2e-3)
