"""Diffuse wall kernels and the boundary-flow operators.

The wall operator re-emits all flux arriving at a boundary point with a
velocity distribution that depends only on that point, so its composition
with chord transport factors through one flux value per boundary node.
Operators are therefore stored in factored form: a per-node departure
distribution ``c[i, j, l]`` (summing to one over (j, l)) plus the exact
per-chord damping and angle shift.  The full cell-space matrix is never
materialized except on demand for small grids.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import GeometryError
from .measures import K_MAX, BoundaryGrid, varpi


class ParameterError(ValueError):
    pass


class GridMismatchError(ValueError):
    pass


def maxwellian_radial(rho, theta=1.0, dim=2):
    rho = np.asarray(rho, float)
    return (2 * np.pi * theta) ** (-dim / 2) * np.exp(-(rho**2) / (2 * theta))


@dataclass
class KernelSpec:
    """Diffuse re-emission kernel on a boundary grid.

    ``variant='maxwell'`` uses a wall Maxwellian at temperature theta(x)
    (scalar or per-node array); ``variant='generalized'`` accepts any
    radial profile ``profile(rho)`` shared by all nodes.  The normalization
    gamma(x) is evaluated with the grid quadrature so the discrete operator
    is stochastic to rounding.
    """

    grid: BoundaryGrid
    variant: str = "maxwell"
    theta: object = 1.0
    profile: object = None
    gamma: np.ndarray = field(init=False, repr=False)
    c: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        g = self.grid
        dim = g.measure.dim
        rho = g.measure.nodes
        if self.variant == "maxwell":
            th = np.broadcast_to(np.asarray(self.theta, float), (g.n_angle,))
            prof = maxwellian_radial(rho[None, :], th[:, None], dim)
        elif self.variant == "generalized":
            if self.profile is None:
                raise ParameterError("generalized kernel needs a radial profile")
            prof = np.broadcast_to(self.profile(rho)[None, :], (g.n_angle, len(rho)))
        else:
            raise ParameterError(f"unknown kernel variant {self.variant!r}")
        # gamma(x_i) = int_{incoming} profile(|v|) |v.n| m(dv), grid quadrature
        flux_w = g.w_dir[:, None] * (rho**dim * g.measure.w_plain)[None, :]
        self.flux_w = flux_w  # (n_dir, n_speed), sum = hemisphere flux mass
        self.gamma = np.einsum("il,jl->i", prof, flux_w)
        if np.any(self.gamma <= 0):
            raise ParameterError("kernel normalization vanished on a node")
        self.c = prof[:, None, :] * flux_w[None, :, :] / self.gamma[:, None, None]
        self.prof = prof

    @property
    def gamma0(self) -> float:
        return float(np.min(self.gamma))

    def theta_max(self) -> float:
        if self.variant == "maxwell":
            return float(np.max(self.theta))
        return 1.0

    def analytic_gamma(self):
        """Closed-form gamma for the Maxwell kernel: sqrt(theta / 2 pi)."""
        if self.variant != "maxwell":
            raise ParameterError("closed form available for Maxwell kernels only")
        th = np.broadcast_to(np.asarray(self.theta, float), (self.grid.n_angle,))
        return np.sqrt(th / (2 * np.pi))

    def normalization_defect(self) -> float:
        """Max deviation of the discrete flux normalization from one."""
        return float(np.max(np.abs(np.sum(self.c, axis=(1, 2)) - 1.0)))


def node_flux(grid: BoundaryGrid, masses) -> np.ndarray:
    """Total cell mass gathered per boundary node."""
    return np.sum(masses, axis=(1, 2))


def apply_H(spec: KernelSpec, masses) -> np.ndarray:
    """Wall redistribution: outgoing cell masses -> incoming cell masses.

    Mass preserving for nonnegative input by construction of the discrete
    normalization.
    """
    masses = np.asarray(masses)
    if masses.shape != spec.grid.shape:
        raise GridMismatchError("input does not match the boundary grid")
    return spec.c * node_flux(spec.grid, masses)[:, None, None]


def apply_M(grid: BoundaryGrid, masses, lam=0.0) -> np.ndarray:
    """Chord transport of incoming cell masses to the outgoing side.

    Exact per-cell chord time in the damping factor; the landing boundary
    node is the nearest grid node to the exact exit angle (direction and
    speed indices are preserved exactly on the disk).
    """
    lam = complex(lam)
    if lam.real < -1e-15:
        raise ParameterError("flow operators require Re lambda >= 0")
    masses = np.asarray(masses)
    damp = np.exp(-lam * grid.tau)
    if lam.imag == 0.0:
        damp = damp.real
    out = np.zeros(grid.shape, dtype=np.result_type(masses.dtype, damp.dtype))  # (n_dir, n_speed)
    for j in range(grid.n_dir):
        out[:, j, :] = np.roll(masses[:, j, :] * damp[j], grid.shift_cells[j], axis=0)
    return out


def apply_MH(grid: BoundaryGrid, spec: KernelSpec, masses, lam=0.0) -> np.ndarray:
    return apply_M(grid, apply_H(spec, masses), lam)


@dataclass
class OperatorMatrix:
    """Discretized boundary-flow operator in factored (flux) form.

    ``flux_matrix`` is the boundary-node transfer matrix; the full cell
    action is ``emit (c) -> damp/shift (chords) -> gather (node flux)``.
    ``dense()`` materializes the cell-space matrix for small grids only.
    """

    grid: BoundaryGrid
    spec: KernelSpec
    lam: complex
    kind: str = "MH"

    def __post_init__(self):
        self.lam = complex(self.lam)
        if self.lam.real < -1e-15:
            raise ParameterError("flow operators require Re lambda >= 0")
        g = self.grid
        damp = np.exp(-self.lam * g.tau)
        K = np.zeros((g.n_angle, g.n_angle), dtype=complex)
        cd = np.sum(self.spec.c * damp[None, :, :], axis=2)  # (n_angle, n_dir)
        for j in range(g.n_dir):
            s = g.shift_cells[j]
            rows = (np.arange(g.n_angle) + s) % g.n_angle
            K[rows, np.arange(g.n_angle)] += cd[:, j]
        self.flux_matrix = K
        self.fingerprint = g.fingerprint()

    def matvec(self, masses):
        return apply_MH(self.grid, self.spec, masses, self.lam)

    def column_masses(self):
        """Signed column mass of the flux matrix (1 for the undamped wall)."""
        return np.sum(self.flux_matrix, axis=0)

    def stochasticity_defect(self) -> float:
        return float(np.max(np.abs(self.column_masses() - 1.0)))

    def mu_norm(self, power: int = 1) -> float:
        """mu-weighted operator 1-norm of the ``power``-th matrix power."""
        if power < 1:
            raise ParameterError("power must be >= 1")
        g = self.grid
        d_out = np.sum(self.spec.c * np.exp(-self.lam.real * g.tau)[None, :, :], axis=(1, 2))
        A = np.eye(g.n_angle, dtype=complex)
        for _ in range(power - 1):
            A = self.flux_matrix @ A
        return float(np.max(d_out @ np.abs(A)))

    def entry_modulus_matches(self, other: "OperatorMatrix") -> bool:
        """Entrywise |self| == other for the undamped reference (exact)."""
        mine = np.abs(self._cell_blocks())
        theirs = other._cell_blocks().real
        return np.allclose(mine, theirs, rtol=0, atol=1e-15)

    def _cell_blocks(self):
        """Per-(j, l) transition factors c[i, j, l] e^{-lam tau[j, l]}."""
        return self.spec.c * np.exp(-self.lam * self.grid.tau)[None, :, :]

    def dense(self, max_cells: int = 6000) -> np.ndarray:
        """Cell-space matrix (column = unit mass in one input cell)."""
        g = self.grid
        n = g.n_cells
        if n > max_cells:
            raise MemoryError(
                f"dense cell matrix has {n}^2 entries; use the factored form"
            )
        shape = g.shape
        blocks = self._cell_blocks()
        A = np.zeros((n, n), dtype=complex)
        col = 0
        for i in range(shape[0]):
            emitted = np.zeros(shape, dtype=complex)
            emitted[i] = blocks[i]
            for j in range(shape[1]):
                emitted[:, j, :] = np.roll(emitted[:, j, :], g.shift_cells[j], axis=0)
            colv = emitted.reshape(n)
            for jl in range(shape[1] * shape[2]):
                A[:, col + jl] = colv
            col += shape[1] * shape[2]
        return A

    def to_csv(self, path, max_cells: int = 6000):
        A = self.dense(max_cells)
        with open(path, "w") as fh:
            fh.write("# row,col,re,im\n")
            for r, c in zip(*np.nonzero(np.abs(A) > 0)):
                fh.write(f"{r},{c},{A[r, c].real:.17g},{A[r, c].imag:.17g}\n")


def assemble_MlambdaH(spec: KernelSpec, grid: BoundaryGrid, lam=0.0) -> OperatorMatrix:
    if grid is not spec.grid:
        raise GridMismatchError("kernel was built on a different grid")
    return OperatorMatrix(grid, spec, lam, kind="MH")


def apply_MH_smooth(spec: KernelSpec, node_masses, lam=0.0) -> np.ndarray:
    """Wall + chord transfer of node masses with exact landing angles.

    Uses trigonometric interpolation of the node-mass profile instead of
    nearest-node deposition, so smooth profiles are transported with
    spectral accuracy.  Reference implementation for kernel-consistency
    checks; the production operator keeps mass-conserving deposition.
    """
    g = spec.grid
    lam = complex(lam)
    a = np.asarray(node_masses, dtype=complex)
    k = np.fft.fftfreq(g.n_angle, d=1.0 / g.n_angle)
    damp = np.exp(-lam * g.tau)
    cd = np.sum(spec.c * damp[None, :, :], axis=2)  # (n_angle, n_dir)
    out = np.zeros(g.n_angle, dtype=complex)
    for j in range(g.n_dir):
        emitted = np.fft.fft(cd[:, j] * a)
        out += np.fft.ifft(emitted * np.exp(-1j * k * g.shift[j]))
    return out


def hm_lambda_h_flux_kernel(spec: KernelSpec, lam=0.0) -> np.ndarray:
    """Flux-transfer matrix of the double-wall composition via the surface
    kernel: visibility Jacobian times the speed-damping integral.

    Nystrom quadrature over boundary nodes; agrees with the composed
    (emit/shift/gather) matrix up to the angle resolution.
    """
    g = spec.grid
    lam = complex(lam)
    R = g.domain.radius
    alphas = g.alphas
    # pairwise geometry on the circle
    da = alphas[None, :] - alphas[:, None]
    dist = 2.0 * R * np.abs(np.sin(da / 2.0))
    # circle: (x-y).n(x) = |x-y|^2 / (2R), so J = |x-y| / (4 R^2)
    J = dist / (4.0 * R * R)
    rho = g.measure.nodes
    K = np.zeros((g.n_angle, g.n_angle), dtype=complex)
    for i2 in range(g.n_angle):  # departure node y
        # speed transfer: int rho profile(y, rho) e^{-lam dist/rho} rho^{d-1} drho
        integ = (
            rho[None, :]
            * spec.prof[i2][None, :]
            * np.exp(-lam * dist[:, i2, None] / rho[None, :])
            * g.measure.w_radial[None, :]
        )
        K[:, i2] = J[:, i2] / spec.gamma[i2] * np.sum(integ, axis=1) * g.w_angle
    np.fill_diagonal(K, 0.0)
    return K


@dataclass
class SplitOperator:
    """Exact small-speed / large-speed split of the wall operator."""

    spec: KernelSpec
    delta: float
    below_mask: np.ndarray

    def norm_below(self, weight_order: int = 0) -> float:
        w = varpi(weight_order, self.spec.grid.measure.nodes)
        return float(
            np.max(np.sum(self.spec.c * self.below_mask * w[None, None, :], axis=(1, 2)))
        )

    def norm_above(self, weight_order: int = 0) -> float:
        w = varpi(weight_order, self.spec.grid.measure.nodes)
        mask = 1.0 - self.below_mask
        return float(np.max(np.sum(self.spec.c * mask * w[None, None, :], axis=(1, 2))))

    def apply_below(self, masses):
        return apply_H(self.spec, masses) * self.below_mask

    def apply_above(self, masses):
        return apply_H(self.spec, masses) * (1.0 - self.below_mask)


def small_velocity_split(spec: KernelSpec, delta: float) -> SplitOperator:
    if not delta > 0:
        raise ParameterError("delta must be positive")
    mask = (spec.grid.measure.nodes <= delta).astype(float)[None, None, :]
    return SplitOperator(spec, float(delta), mask)


@dataclass
class WeightedOperatorNorm:
    """Norm ledger of the wall operator into the inverse-speed hierarchy."""

    norms: np.ndarray  # entry k: norm as a map into weight order k+1
    diverging: np.ndarray  # grid-refinement divergence flags per k
    n_gain: int  # largest k with a finite (stable) norm


def weighted_norms(spec: KernelSpec, refine_check: bool = True) -> WeightedOperatorNorm:
    """Operator norms of the wall kernel into the weighted spaces.

    The gain order is decided by the continuum radial criterion (small-speed
    exponent of the profile); the grid-refinement growth of each norm is
    reported as a secondary divergence flag.
    """
    g = spec.grid
    rho = g.measure.nodes
    norms = np.empty(K_MAX + 1)
    for k in range(K_MAX + 1):
        w = varpi(k + 1, rho)
        norms[k] = np.max(np.sum(spec.c * w[None, None, :], axis=(1, 2)))
    # continuum criterion: profile ~ rho^a at 0 gives finiteness iff k < d + a
    r1, r2 = 1e-6, 1e-7
    if spec.variant == "maxwell":
        p1 = p2 = 1.0
    else:
        p1, p2 = float(spec.profile(np.array([r1]))[0]), float(spec.profile(np.array([r2]))[0])
    a = 0.0 if p1 == 0 or p2 == 0 else np.log(p1 / p2) / np.log(r1 / r2)
    d = g.measure.dim
    n_gain = int(np.ceil(d + a) - 1)
    if abs(d + a - round(d + a)) < 1e-9:
        n_gain = int(round(d + a)) - 1
    diverging = np.zeros(K_MAX + 1, dtype=bool)
    if refine_check:
        from .measures import VelocityMeasure

        m = g.measure
        fine = VelocityMeasure(
            dim=m.dim,
            rho_max=m.rho_max,
            n_speed=2 * m.n_speed,
            split=m.split,
            n_small_panels=m.n_small_panels + 2,
            refine_ratio=m.refine_ratio,
        )
        fine_grid = BoundaryGrid(g.domain, g.n_angle, g.n_dir, fine)
        fine_spec = KernelSpec(fine_grid, spec.variant, spec.theta, spec.profile)
        for k in range(K_MAX + 1):
            w = varpi(k + 1, fine.nodes)
            fine_norm = np.max(np.sum(fine_spec.c * w[None, None, :], axis=(1, 2)))
            diverging[k] = fine_norm >= 2.0 * norms[k]
    return WeightedOperatorNorm(norms, diverging, n_gain)


def apply_flow_operator(kind: str, lam, target, data, **kw):
    """Dispatch the four boundary-flow maps by kind.

    kind 'M': incoming boundary masses -> outgoing (``target`` is the
    BoundaryGrid); 'G', 'Xi', 'R' act between the phase grid and the
    boundary grid (``target`` is a SurrogateSpace from kinrelax.surrogate).
    """
    lam = complex(lam)
    if lam.real < -1e-15:
        raise ParameterError("flow operators require Re lambda >= 0")
    if kind == "M":
        return apply_M(target, data, lam)
    from . import surrogate

    if kind == "G":
        return surrogate.apply_G(target, data, lam)
    if kind in ("Xi", "Ξ"):
        return surrogate.apply_Xi(target, data, lam, **kw)
    if kind == "R":
        return surrogate.apply_R(target, data, lam)
    raise ParameterError(f"unknown flow operator kind {kind!r}")
