import numpy as np
import pytest

from kinrelax.boundary import (
    KernelSpec,
    apply_MH_smooth,
    OperatorMatrix,
    ParameterError,
    apply_H,
    apply_M,
    apply_MH,
    assemble_MlambdaH,
    hm_lambda_h_flux_kernel,
    maxwellian_radial,
    small_velocity_split,
    weighted_norms,
)
from kinrelax.geometry import Domain
from kinrelax.measures import BoundaryGrid, VelocityMeasure

DISK = Domain(dim=2)


@pytest.fixture(scope="module")
def grid():
    return BoundaryGrid(DISK, n_angle=64, n_dir=32, measure=VelocityMeasure(dim=2, rho_max=8.0, n_speed=48))


@pytest.fixture(scope="module")
def spec(grid):
    return KernelSpec(grid, "maxwell", theta=1.0)


def test_gamma_matches_closed_form(spec):
    assert np.allclose(spec.gamma, 1 / np.sqrt(2 * np.pi), rtol=2e-8)
    assert np.allclose(spec.analytic_gamma(), 1 / np.sqrt(2 * np.pi))
    assert spec.gamma0 > 0


def test_normalization_defect(spec):
    assert spec.normalization_defect() <= 1e-12


def test_apply_H_mass_preserving(spec, grid):
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = rng.random(grid.shape)
        out = apply_H(spec, m)
        assert np.sum(out) == pytest.approx(np.sum(m), rel=1e-12)
        assert np.all(out >= 0)


def test_apply_H_zero(spec, grid):
    assert np.all(apply_H(spec, np.zeros(grid.shape)) == 0)


def test_apply_H_single_cell_column(spec, grid):
    m = np.zeros(grid.shape)
    m[5, 3, 7] = 2.5
    out = apply_H(spec, m)
    # output is concentrated at the same boundary node, with the node's
    # departure profile, carrying exactly the input mass
    assert np.sum(np.abs(out[np.arange(64) != 5])) == 0.0
    assert np.sum(out) == pytest.approx(2.5, rel=1e-14)
    assert np.allclose(out[5], 2.5 * spec.c[5])


def test_maxwellian_fixed_point(spec, grid):
    # position-independent wall Maxwellian is invariant under wall + chord
    rho = grid.measure.nodes
    values = maxwellian_radial(rho, 1.0, 2)[None, None, :] * np.ones(grid.shape)
    masses = values * grid.weights
    out = apply_MH(grid, spec, masses, lam=0.0)
    assert np.allclose(out, masses, rtol=1e-10, atol=1e-18)


def test_apply_M_isometry_and_single_cell(grid):
    rng = np.random.default_rng(5)
    u = rng.random(grid.shape)
    out = apply_M(grid, u, 0.0)
    assert np.sum(out) == pytest.approx(np.sum(u), rel=1e-14)
    # damped single cell carries e^{-tau}
    u = np.zeros(grid.shape)
    u[10, 4, 11] = 1.0
    out = apply_M(grid, u, 1.0)
    tau = grid.tau[4, 11]
    target = (10 + grid.shift_cells[4]) % grid.n_angle
    assert out[target, 4, 11] == pytest.approx(np.exp(-tau), rel=1e-14)
    assert np.sum(np.abs(out)) == pytest.approx(np.exp(-tau), rel=1e-14)


def test_negative_real_lambda_rejected(grid, spec):
    with pytest.raises(ParameterError):
        apply_M(grid, np.zeros(grid.shape), -0.5)
    with pytest.raises(ParameterError):
        assemble_MlambdaH(spec, grid, -1.0)


def test_operator_matrix_stochastic(spec, grid):
    op = assemble_MlambdaH(spec, grid, 0.0)
    assert op.stochasticity_defect() <= 1e-12
    assert np.all(op.flux_matrix.real >= 0)
    assert np.max(np.abs(op.flux_matrix.imag)) == 0.0


def test_operator_matrix_matches_composition(spec, grid):
    rng = np.random.default_rng(9)
    op = assemble_MlambdaH(spec, grid, 0.3 + 1.1j)
    for _ in range(10):
        m = rng.random(grid.shape)
        via_ops = apply_MH(grid, spec, m, 0.3 + 1.1j)
        via_op = op.matvec(m)
        assert np.allclose(via_op, via_ops, rtol=1e-12, atol=1e-15)
        # flux matrix reproduces node masses of the full action
        node_in = np.sum(m, axis=(1, 2))
        node_out = op.flux_matrix @ node_in
        assert np.allclose(np.sum(via_op, axis=(1, 2)), node_out, rtol=1e-12)


def test_modulus_of_oscillatory_matches_undamped(spec, grid):
    op0 = assemble_MlambdaH(spec, grid, 0.0)
    opi = assemble_MlambdaH(spec, grid, 0.5j)
    assert np.allclose(np.abs(opi._cell_blocks()), op0._cell_blocks().real, atol=1e-15)


def test_contraction_for_sampled_lambdas(spec, grid):
    rng = np.random.default_rng(17)
    for _ in range(20):
        lam = complex(rng.uniform(0, 3), rng.uniform(-10, 10))
        op = assemble_MlambdaH(spec, grid, lam)
        assert op.mu_norm(1) <= 1.0 + 1e-12
    op1 = assemble_MlambdaH(spec, grid, 1.0)
    assert op1.mu_norm(1) < 1.0


def test_norm_monotone_in_power(spec, grid):
    op = assemble_MlambdaH(spec, grid, 2.0j)
    norms = [op.mu_norm(p) for p in (1, 2, 3, 4, 6)]
    assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))
    # submultiplicativity of the even powers
    assert op.mu_norm(4) <= op.mu_norm(2) ** 2 + 1e-12


def test_dense_matrix_small_grid(spec):
    g = BoundaryGrid(DISK, n_angle=8, n_dir=4, measure=VelocityMeasure(dim=2, rho_max=4.0, n_speed=10))
    sp = KernelSpec(g, "maxwell", 1.0)
    op = assemble_MlambdaH(sp, g, 0.7)
    A = op.dense()
    rng = np.random.default_rng(1)
    m = rng.random(g.shape)
    out = op.matvec(m)
    assert np.allclose(A @ m.reshape(-1), out.reshape(-1), rtol=1e-12, atol=1e-15)
    # mu-weighted column stochasticity of the undamped wall, entrywise dense
    A0 = assemble_MlambdaH(sp, g, 0.0).dense()
    assert np.allclose(np.sum(A0.real, axis=0), 1.0, atol=1e-12)


def test_small_velocity_split_exact_and_limits(spec, grid):
    rng = np.random.default_rng(2)
    m = rng.random(grid.shape)
    sp = small_velocity_split(spec, 0.3)
    assert np.allclose(sp.apply_below(m) + sp.apply_above(m), apply_H(spec, m), rtol=1e-14)
    every = small_velocity_split(spec, grid.measure.rho_max + 1)
    assert every.norm_above(0) == 0.0
    assert every.norm_below(0) == pytest.approx(1.0, rel=1e-12)
    tiny = small_velocity_split(spec, 1e-9)
    assert tiny.norm_below(0) == 0.0


def test_small_velocity_split_scaling(spec, grid):
    deltas = np.array([0.05, 0.1, 0.2, 0.4])
    wnorms = weighted_norms(spec, refine_check=False)
    for d in deltas:
        sp = small_velocity_split(spec, d)
        # the weighted-norm bound holds at every admissible order
        for k in range(wnorms.n_gain + 1):
            assert sp.norm_below(0) <= wnorms.norms[k] * d ** (k + 1) * (1 + 1e-12)
    # slope measurement on a small-speed refined grid (mask granularity)
    fine = VelocityMeasure(dim=2, rho_max=8.0, n_speed=96, n_small_panels=12)
    fine_spec = KernelSpec(BoundaryGrid(DISK, 16, 8, fine), "maxwell", 1.0)
    below_l1, below_y1 = [], []
    for d in deltas:
        sp = small_velocity_split(fine_spec, d)
        below_l1.append(sp.norm_below(0))
        below_y1.append(sp.norm_below(1))
    # measured first-weighted norm scales like delta^(gain + 1) = delta^2
    slope_y1 = np.polyfit(np.log(deltas), np.log(below_y1), 1)[0]
    assert slope_y1 == pytest.approx(2.0, abs=0.05)
    # plain operator norm decays one power faster (cubic for a planar wall)
    slope_l1 = np.polyfit(np.log(deltas), np.log(below_l1), 1)[0]
    assert slope_l1 == pytest.approx(3.0, abs=0.1)


def test_weighted_norms_gain_orders(grid):
    mw = KernelSpec(grid, "maxwell", 1.0)
    assert weighted_norms(mw, refine_check=False).n_gain == 1
    g3 = VelocityMeasure(dim=3, rho_max=8.0, n_speed=40)
    # the gain criterion is radial; reuse the disk grid machinery in d=2 but
    # query the dim=3 criterion through a speed-weighted profile instead
    lifted = KernelSpec(grid, "generalized", profile=lambda r: r * maxwellian_radial(r, 1.0, 2))
    assert weighted_norms(lifted, refine_check=False).n_gain == 2


def test_weighted_norms_divergence_flags(spec):
    w = weighted_norms(spec, refine_check=True)
    # orders up to the gain are stable under refinement; the first divergent
    # order (k = 2) is only log-divergent so the 2x heuristic reports from
    # k = 3 on, which is why the continuum criterion owns the gain order
    assert not w.diverging[0]
    assert not w.diverging[1]
    assert w.diverging[3] and w.diverging[4]
    assert w.n_gain == 1


def test_hm_kernel_consistency_with_composition():
    # surface-kernel assembly vs exact-angle composition of the wall and
    # chord maps; nearest-node deposition quantizes angles at O(h), so the
    # composition side interpolates trigonometrically for this check
    # oscillatory speed factors at complex rates need extra speed nodes
    g = BoundaryGrid(DISK, n_angle=1024, n_dir=32, measure=VelocityMeasure(dim=2, rho_max=8.0, n_speed=96, n_small_panels=10))
    sp = KernelSpec(g, "maxwell", 1.0)
    rng = np.random.default_rng(4)
    modes = np.exp(1j * np.outer(g.alphas, [0, 1, 2, 3, -2]))
    coeff = rng.normal(size=(5,)) + 1j * rng.normal(size=(5,))
    F = (modes @ coeff).real
    for lam in (0.0, 0.8, 1.5j):
        K_ker = hm_lambda_h_flux_kernel(sp, lam)
        lhs = apply_MH_smooth(sp, F, lam)
        rhs = K_ker @ F
        assert np.max(np.abs(lhs - rhs)) <= 1e-5 * np.max(np.abs(F))
        # deposition differs from both only through angle quantization
        K_dep = assemble_MlambdaH(sp, g, lam).flux_matrix
        assert np.max(np.abs(K_dep @ F - rhs)) <= 0.3 * (2 * np.pi / g.n_angle) * np.max(np.abs(F))
