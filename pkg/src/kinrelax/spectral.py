"""Spectral objects of the wall + chord transfer operator.

All eigen-analysis happens on the boundary-node flux matrix: the wall
operator factors through one flux value per node, so the nonzero spectrum
of the full cell-space operator equals that of the small node matrix and
eigenvectors lift exactly through the departure/transport maps.

Large-frequency norms additionally get a quadrature-grade path: on a disk
with position-independent temperature the flux transfer is a convolution
over the boundary angle whose speed integral is an oscillatory transform;
that transform is tabulated once with a phase-resolving grid, immune to
the aliasing a fixed speed grid suffers once phases rotate faster than the
node spacing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .boundary import KernelSpec, OperatorMatrix, ParameterError, assemble_MlambdaH
from .measures import BoundaryGrid, gauss_panel
from .surrogate import SurrogateSpace


class ConvergenceError(RuntimeError):
    pass


@dataclass
class PerronData:
    """Stationary data of the undamped wall + chord transfer."""

    flux: np.ndarray  # stationary node-mass vector, sum one
    phi0: np.ndarray  # outgoing cell masses of the fixed point, total mass one
    residual: float  # cell-space fixed-point residual in mass norm
    gap: float  # modulus of the second flux eigenvalue


@dataclass
class LeadingEigen:
    lam: complex
    nu: complex
    right: np.ndarray  # node-flux right eigenvector
    left: np.ndarray  # node-flux left eigenvector
    simple: bool
    residual: float


def perron_fixed_point(op: OperatorMatrix, tol=1e-13, max_iter=100_000) -> PerronData:
    """Positive fixed point of the undamped transfer by power iteration.

    The flux matrix is column-stochastic so iteration preserves total mass;
    the gap comes from a dense eigensolve of the small node matrix.
    """
    K = op.flux_matrix.real
    n = K.shape[0]
    if op.stochasticity_defect() > 1e-8:
        raise ParameterError("transfer matrix is not stochastic")
    f = np.full(n, 1.0 / n)
    for it in range(max_iter):
        nf = K @ f
        nf /= np.sum(nf)
        if np.max(np.abs(nf - f)) < tol * np.max(np.abs(nf)):
            f = nf
            break
        f = nf
    else:
        ev = np.sort(np.abs(np.linalg.eigvals(K)))[::-1]
        raise ConvergenceError(
            f"power iteration stalled; spectral gap about {1 - ev[1]:.2e}"
        )
    if n <= 4000:
        ev = np.sort(np.abs(np.linalg.eigvals(K)))[::-1]
        gap_mod = float(ev[1])
    else:
        gap_mod = np.nan
    from .boundary import apply_M

    phi0 = apply_M(op.grid, op.spec.c * f[:, None, None], 0.0)
    phi0 /= np.sum(phi0)
    residual = float(np.sum(np.abs(op.matvec(phi0) - phi0)))
    if np.any(phi0 < 0):
        raise ConvergenceError("fixed point lost positivity")
    return PerronData(flux=f, phi0=phi0, residual=residual, gap=gap_mod)


def left_eigenvector_defect(op: OperatorMatrix) -> float:
    """How far the constant functional is from being a left fixed vector."""
    ones = np.ones(op.flux_matrix.shape[0])
    return float(np.max(np.abs(ones @ op.flux_matrix - ones)))


def invariant_density(space: SurrogateSpace, perron: PerronData, symmetric=None):
    """Stationary phase density as in-flight mass of the stationary wall flux.

    Normalized to unit total mass.  For rotation-invariant walls (constant
    temperature, uniform stationary flux) the exact rotation-averaged lift
    removes chord-sampling roughness; otherwise the deposition lift is used.
    The boundary traces satisfy the wall condition identically because they
    are rebuilt from the same stationary flux.
    """
    if symmetric is None:
        symmetric = (
            np.ptp(perron.flux) < 1e-10 * np.max(perron.flux)
            and space.phase.n_ang == space.phase.n_omega
        )
    if symmetric:
        psi = space.lift_symmetric()
    else:
        psi = space.lift_Xi(space.spec.c * perron.flux[:, None, None], 0.0).real
    total = np.sum(psi)
    if total <= 0:
        raise ConvergenceError("invariant lift lost positivity")
    return psi / total


def invariant_trace_defect(space: SurrogateSpace, perron: PerronData) -> float:
    """Wall-condition defect of the stationary traces, relative mass."""
    from .boundary import apply_H, apply_M

    departures = space.spec.c * perron.flux[:, None, None]
    arrivals = apply_M(space.grid, departures, 0.0)
    again = apply_H(space.spec, arrivals)
    return float(np.sum(np.abs(again - departures)) / np.sum(departures))


def leading_eigenvalue(spec: KernelSpec, grid: BoundaryGrid, lam) -> LeadingEigen:
    lam = complex(lam)
    if lam.real < -1e-15:
        raise ParameterError("spectrum studied on Re lambda >= 0 only")
    K = assemble_MlambdaH(spec, grid, lam).flux_matrix
    vals, lvecs, rvecs = scipy.linalg.eig(K, left=True, right=True)
    order = np.argsort(-np.abs(vals))
    nu = vals[order[0]]
    gap = np.abs(vals[order[0]]) - np.abs(vals[order[1]])
    right = rvecs[:, order[0]]
    left = lvecs[:, order[0]].conj()
    residual = float(np.linalg.norm(K @ right - nu * right) / np.linalg.norm(right))
    return LeadingEigen(
        lam=lam,
        nu=complex(nu),
        right=right,
        left=left,
        simple=bool(gap > 1e-6),
        residual=residual,
    )


def eigenprojection(spec: KernelSpec, grid: BoundaryGrid, lam) -> np.ndarray:
    """Rank-one spectral projection of the flux matrix at its leading
    eigenvalue."""
    e = leading_eigenvalue(spec, grid, lam)
    denom = e.left @ e.right
    if abs(denom) < 1e-12:
        raise ConvergenceError("degenerate eigenprojection pairing")
    return np.outer(e.right, e.left) / denom


def nu_prime_zero(spec: KernelSpec, grid: BoundaryGrid, perron: PerronData) -> float:
    """Derivative of the leading eigenvalue at zero: minus the mean chord
    time of the stationary outgoing flux."""
    return -float(np.sum(grid.tau[None, :, :] * perron.phi0))


def nu_prime_zero_fd(spec: KernelSpec, grid: BoundaryGrid, h=2e-3) -> float:
    """One-sided second-order finite difference of nu along the real axis."""
    nu0 = leading_eigenvalue(spec, grid, 0.0).nu.real
    nu1 = leading_eigenvalue(spec, grid, h).nu.real
    nu2 = leading_eigenvalue(spec, grid, 2 * h).nu.real
    return float((-3 * nu0 + 4 * nu1 - nu2) / (2 * h))


def closed_form_nu_prime(domain, theta=1.0) -> float:
    """Mean-chord closed form for constant wall temperature on a disk/ball:
    -|domain| / (|boundary| gamma)."""
    gamma = np.sqrt(theta / (2 * np.pi))
    return -domain.volume / (domain.surface * gamma)


# ---------------------------------------------------------------------------
# quadrature-grade speed transform and resolved norms (constant temperature)


@dataclass
class SpeedTransform:
    """Tabulated oscillatory transform of the departure speed law:
    S(w) = int q(rho) exp(-i w / rho) drho with q the flux speed density."""

    w_grid: np.ndarray
    values: np.ndarray

    def __call__(self, w):
        w = np.asarray(w, float)
        out = np.interp(w, self.w_grid, self.values.real) + 1j * np.interp(
            w, self.w_grid, self.values.imag
        )
        return np.where(w > self.w_grid[-1], 0.0, out)


def speed_transform(spec: KernelSpec, w_max=120.0, n_w=600, u_max=800.0) -> SpeedTransform:
    """Phase-resolving tabulation of the speed transform (node 0 profile).

    Integration runs in the reciprocal speed where the oscillation is
    uniform; the amplitude vanishes to all orders at zero and decays
    algebraically, so panelwise Gauss with a few nodes per period converges.
    """
    g = spec.grid
    d = g.measure.dim
    rho = g.measure.nodes
    qnorm = float(np.sum(spec.prof[0] * rho**d * g.measure.w_plain))

    def amplitude(u):
        r = 1.0 / u
        if spec.variant == "maxwell":
            th = float(np.atleast_1d(spec.theta)[0])
            prof = (2 * np.pi * th) ** (-d / 2) * np.exp(-(r**2) / (2 * th))
        else:
            prof = spec.profile(r)
        return prof * r**d / (u * u) / qnorm

    w_grid = np.linspace(0.0, w_max, n_w)
    # panels in u: refined near 0 for the essential singularity, then wide
    edges = np.concatenate(
        [np.linspace(0.0, 2.0, 41), np.geomspace(2.0, u_max, 120)]
    )
    vals = np.zeros(n_w, dtype=complex)
    for a, b in zip(edges[:-1], edges[1:]):
        n = max(6, int(np.ceil((b - a) * w_max / (2 * np.pi) * 4)) + 4)
        n = min(n, 2000)
        u, wu = gauss_panel(a, b, n)
        if a == 0.0:
            u = np.maximum(u, 1e-12)
        A = amplitude(u) * wu
        vals += (A[None, :] * np.exp(-1j * np.outer(w_grid, u))).sum(axis=1)
    return SpeedTransform(w_grid, vals)


def resolved_power_norm(spec: KernelSpec, S: SpeedTransform, eta, p=2, n_psi=400, n_u=4096):
    """Operator 1-norm of the p-th transfer power, continuum-in-angle.

    The angle transfer is a convolution with kernel
    k(u) = sin(u/2)/4 * S(2 R eta sin(u/2)); powers are taken by FFT and the
    1-norm is the total variation of the iterated kernel.
    """
    g = spec.grid
    R = g.domain.radius
    eta = float(eta)
    if p < 1:
        raise ParameterError("power must be >= 1")
    if p == 1:
        return 1.0 if eta == 0.0 else float(np.abs(S(0.0)))
    psi, wpsi = gauss_panel(-np.pi / 2, np.pi / 2, n_psi)
    if p == 2:
        vals = S(2 * R * eta * np.cos(psi))
        return float(np.sum(wpsi * np.cos(psi) / 2 * np.abs(vals)))
    u = np.arange(n_u) * (2 * np.pi / n_u)
    k = np.sin(u / 2) / 4 * S(2 * R * eta * np.sin(u / 2))
    khat = np.fft.fft(k) * (2 * np.pi / n_u)
    iterated = np.fft.ifft(khat ** (p - 1)) / (2 * np.pi / n_u)
    return float(np.sum(np.abs(iterated)) * (2 * np.pi / n_u))


def resolved_nu_modes(spec: KernelSpec, S: SpeedTransform, eta, m_max=40, n_psi=400):
    """Angular-mode eigenvalues of the continuum transfer at i eta."""
    g = spec.grid
    R = g.domain.radius
    psi, wpsi = gauss_panel(-np.pi / 2, np.pi / 2, n_psi)
    base = wpsi * np.cos(psi) / 2 * S(2 * R * eta * np.cos(psi))
    ms = np.arange(-m_max, m_max + 1)
    phases = np.exp(2j * np.outer(ms, psi))
    vals = phases @ base * ((-1.0) ** ms)
    return ms, vals


@dataclass
class PowerNormProfile:
    etas: np.ndarray
    norms: np.ndarray
    power: int
    method: str

    def fitted_slope(self, eta_min=None, eta_max=None):
        sel = np.ones(len(self.etas), bool)
        if eta_min is not None:
            sel &= self.etas >= eta_min
        if eta_max is not None:
            sel &= self.etas <= eta_max
        x = np.log(self.etas[sel])
        y = np.log(self.norms[sel])
        return float(np.polyfit(x, y, 1)[0])

    def tail_integral(self, eta_from):
        sel = self.etas >= eta_from
        return float(np.trapezoid(self.norms[sel], self.etas[sel]))


def power_norm_profile(spec: KernelSpec, grid: BoundaryGrid, p, eta_list, method="resolved") -> PowerNormProfile:
    """mu-weighted operator 1-norms of transfer powers over a frequency list.

    method 'deposition' uses the assembled node matrix (exact for the grid
    operator, aliasing once chord phases rotate faster than the speed
    nodes); 'resolved' uses the tabulated oscillatory speed transform with
    continuum angles (constant-temperature disks).
    """
    etas = np.asarray(eta_list, float)
    norms = np.empty_like(etas)
    if method == "deposition":
        for i, eta in enumerate(etas):
            norms[i] = assemble_MlambdaH(spec, grid, 1j * eta).mu_norm(p)
    elif method == "resolved":
        if spec.variant == "maxwell" and np.ndim(spec.theta) > 0 and np.ptp(np.atleast_1d(spec.theta)) > 0:
            raise ParameterError("resolved norms assume constant temperature")
        w_need = 2 * grid.domain.radius * float(np.max(etas))
        S = speed_transform(spec, w_max=min(w_need + 20.0, 150.0))
        for i, eta in enumerate(etas):
            norms[i] = resolved_power_norm(spec, S, eta, p)
    else:
        raise ParameterError("method must be deposition|resolved")
    return PowerNormProfile(etas, norms, p, method)
