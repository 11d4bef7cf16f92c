import numpy as np
import pytest

from kinrelax.geometry import Domain, GeometryError
from kinrelax.measures import (
    BoundaryGrid,
    VelocityMeasure,
    cartesian_velocity_integral,
    direct_phase_integral,
    jacobian,
    phase_integral_via_boundary,
    polar_integral,
    pushforward_identity_check,
    sphere_to_boundary,
    varpi,
)

DISK = Domain(dim=2)
BALL = Domain(dim=3)


def maxwellian(v, theta=1.0):
    v = np.asarray(v, float)
    d = v.shape[-1]
    sq = np.sum(v * v, axis=-1)
    return (2 * np.pi * theta) ** (-d / 2) * np.exp(-sq / (2 * theta))


@pytest.fixture(scope="module")
def vm2():
    return VelocityMeasure(dim=2, rho_max=8.0, n_speed=48)


@pytest.fixture(scope="module")
def grid(vm2):
    return BoundaryGrid(DISK, n_angle=64, n_dir=32, measure=vm2)


def test_radial_mass_exact(vm2):
    # quadrature must reproduce int_0^8 rho drho exactly (polynomial)
    assert vm2.radial_mass() == pytest.approx(8.0**2 / 2, rel=1e-12)
    vm3 = VelocityMeasure(dim=3, rho_max=8.0, n_speed=48)
    assert vm3.radial_mass() == pytest.approx(8.0**3 / 3, rel=1e-12)


def test_no_node_at_zero(vm2):
    assert np.all(vm2.nodes > 0)
    assert np.all(vm2.w_plain > 0)


def test_boundary_grid_mass(grid):
    assert grid.total_mass() == pytest.approx(grid.analytic_mass(), rel=1e-6)
    assert np.all(grid.weights > 0)
    assert np.all(np.cos(grid.psi) > 0)  # no grazing cells


def test_weighted_norm_monotone(grid):
    rng = np.random.default_rng(0)
    f = rng.random(grid.shape)
    norms = [grid.cell_norm(f, k) for k in range(5)]
    assert all(norms[k + 1] >= norms[k] for k in range(4))


def test_phase_integral_constant(grid):
    # h = 1 on unit disk x (|v| <= 1): area pi times velocity mass pi
    vm = VelocityMeasure(dim=2, rho_max=1.0, n_speed=32)
    g = BoundaryGrid(DISK, n_angle=32, n_dir=24, measure=vm)
    one = lambda x, v: np.ones(x.shape[:-1])
    val = phase_integral_via_boundary(g, one, "outgoing")
    assert val == pytest.approx(np.pi * np.pi, rel=1e-7)
    val_in = phase_integral_via_boundary(g, one, "incoming")
    assert val_in == pytest.approx(np.pi * np.pi, rel=1e-7)


def test_phase_integral_maxwellian_both_sides(grid, vm2):
    h = lambda x, v: maxwellian(v)
    out = phase_integral_via_boundary(grid, h, "outgoing")
    inc = phase_integral_via_boundary(grid, h, "incoming")
    ref = direct_phase_integral(DISK, vm2, h)
    assert out == pytest.approx(np.pi, rel=1e-7)
    assert inc == pytest.approx(np.pi, rel=1e-7)
    assert out == pytest.approx(ref, rel=1e-7)


def test_phase_integral_travel_time_cutoff(grid, vm2):
    # h = indicator of backward travel time below s0; inner integral along a
    # backward chord from the outgoing side is min(s0, tau) exactly, and the
    # reference value is int (|disk| - lens(s0 |v|)) m(dv) via the exact
    # overlap area of the disk with its own translate.
    s0 = 0.1

    def chord_integral(z, v, tau):
        return np.minimum(s0, tau) * np.ones(z.shape[:-1])

    # the kink surface tau = s0 sits at grazing directions: resolve them
    g = BoundaryGrid(DISK, n_angle=64, n_dir=64, measure=vm2, dir_refine_outer=True)
    val = phase_integral_via_boundary(g, None, "outgoing", chord_integral=chord_integral)

    def lens(s):
        s = np.minimum(s, 2.0)
        return 2 * np.arccos(s / 2) - (s / 2) * np.sqrt(4 - s * s)

    # int over directions is isotropic: m(dv)-mass of {t_minus < s0} per speed
    # shell equals 2*pi*rho*(pi - lens(s0*rho)) drho
    ref = 2 * np.pi * float(np.sum(vm2.w_radial * (np.pi - lens(s0 * vm2.nodes))))
    assert val == pytest.approx(ref, rel=1e-4)


def test_pushforward_identity(grid):
    one = lambda z, v: np.ones(z.shape[:-1])
    lhs, rhs, defect = pushforward_identity_check(grid, one)
    assert lhs == pytest.approx(grid.total_mass(), rel=1e-12)
    assert defect <= 1e-12

    mw = lambda z, v: maxwellian(v)
    _, _, defect = pushforward_identity_check(grid, mw)
    assert defect <= 1e-8

    tilted = lambda z, v: (1.0 + z[..., 0]) * maxwellian(v)
    lhs, rhs, defect = pushforward_identity_check(grid, tilted)
    assert defect <= 1e-6


def test_polar_integral_indicator(vm2):
    vm = VelocityMeasure(dim=2, rho_max=8.0, n_speed=48)
    val = polar_integral(vm, lambda v: 1.0 * (np.sum(v * v, axis=-1) <= 1.0))
    assert val == pytest.approx(np.pi, rel=1e-10)


def test_polar_integral_maxwellian(vm2):
    val = polar_integral(vm2, maxwellian)
    assert val == pytest.approx(1.0, rel=2e-8)
    ref = cartesian_velocity_integral(vm2, maxwellian)
    assert val == pytest.approx(ref, rel=1e-8)


def test_polar_integral_speed_moment(vm2):
    val = polar_integral(vm2, lambda v: np.sqrt(np.sum(v * v, axis=-1)) * maxwellian(v))
    assert val == pytest.approx(np.sqrt(np.pi / 2), rel=2e-8)


def test_jacobian_circle():
    rng = np.random.default_rng(7)
    a, b = rng.uniform(0, 2 * np.pi, (2, 100))
    x = DISK.boundary_point(a)
    y = DISK.boundary_point(b)
    J = jacobian(DISK, x, y)
    dist = np.linalg.norm(x - y, axis=-1)
    assert np.allclose(J, dist / 4, atol=1e-13)
    # symmetry is exact from the formula
    assert np.array_equal(J, jacobian(DISK, y, x))


def test_jacobian_sphere_constant():
    rng = np.random.default_rng(8)
    pts = rng.normal(size=(60, 3))
    pts /= np.linalg.norm(pts, axis=-1, keepdims=True)
    x, y = pts[:30], pts[30:]
    J = jacobian(BALL, x, y)
    assert np.allclose(J, 0.25, atol=1e-12)


def test_jacobian_upper_bound_near_tangency():
    # smooth boundary with alpha = 1: J <= C / |x-y|^{d-1-2alpha} = C |x-y|
    base = DISK.boundary_point(0.0)
    offs = np.geomspace(1e-6, 1e-1, 12)
    y = DISK.boundary_point(offs)
    J = jacobian(DISK, np.broadcast_to(base, y.shape), y)
    dist = np.linalg.norm(base - y, axis=-1)
    assert np.all(J <= 0.26 * dist)
    assert np.all(np.diff(J) > 0)  # vanishes smoothly into the tangency


def test_jacobian_coincident_raises():
    with pytest.raises(GeometryError):
        jacobian(DISK, [1.0, 0.0], [1.0, 0.0])


def test_change_of_variables_circle():
    x = DISK.boundary_point(0.3)
    one = lambda t: np.ones(np.shape(t))
    lhs, rhs, defect = sphere_to_boundary(DISK, x, one, lambda y: np.ones(y.shape[:-1]))
    assert lhs == pytest.approx(2.0, rel=1e-10)
    assert rhs == pytest.approx(2.0, rel=1e-10)
    assert defect <= 1e-10


def test_change_of_variables_circle_decaying():
    x = DISK.boundary_point(1.1)
    lhs, rhs, defect = sphere_to_boundary(
        DISK, x, lambda t: np.exp(-t), lambda y: np.ones(y.shape[:-1])
    )
    assert defect <= 1e-6


def test_change_of_variables_sphere():
    x = BALL.boundary_point(0.4, polar=1.0)
    one = lambda t: np.ones(np.shape(t))
    lhs, rhs, defect = sphere_to_boundary(BALL, x, one, lambda y: np.ones(y.shape[:-1]))
    assert lhs == pytest.approx(np.pi, rel=1e-8)
    assert rhs == pytest.approx(np.pi, rel=1e-8)


def test_change_of_variables_random_points(grid):
    rng = np.random.default_rng(11)
    for a in rng.uniform(0, 2 * np.pi, 20):
        x = DISK.boundary_point(a)
        _, _, defect = sphere_to_boundary(
            DISK, x, lambda t: 1.0 / (1.0 + t), lambda y: 1.0 + 0.5 * y[..., 0]
        )
        assert defect <= 1e-6


def test_varpi():
    assert varpi(2, [0.5, 2.0]) == pytest.approx([4.0, 1.0])
