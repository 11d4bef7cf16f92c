"""Frequency-domain machinery: resolvent chains on the surrogate space,
the boundary function of the bounce-expansion remainder, its analytic
frequency derivative, and oscillatory Fourier inversion back to the time
domain.

The remainder of the bounce expansion past order n has Laplace transform

    upsilon_n(lambda) f = lift_lambda . wall . K_lambda^n (I - K_lambda)^{-1} F0(lambda)

with K the node flux-transfer matrix and F0 the node-aggregated Laplace
transform of the first wall arrivals.  Along the imaginary axis the
resolvent factor is solved directly (never expanded, since the transfer
spectrum touches one at zero frequency) and at zero frequency the
stationary direction is removed analytically, which requires the datum to
carry zero total mass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boundary import ParameterError
from .spectral import leading_eigenvalue, nu_prime_zero, perron_fixed_point
from .surrogate import SurrogateSpace, _residence


class ZeroMeanRequiredError(ValueError):
    pass


class TailTooLargeError(ValueError):
    pass


def default_eta_grid(eta_max=25.0, step=0.05, eta_min=1e-3, n_log=16, mid=3.0):
    """Nonnegative frequency nodes: log-refined near zero, then uniform.

    The boundary function varies fastest below |eta| of order one (the
    resolvent factor turns over on the scale of the stationary eigenvalue
    derivative), so the grid is dense there and plain-uniform in the tail.
    """
    lo = np.concatenate([[0.0], np.geomspace(eta_min, 0.1, n_log)])
    mid_part = np.arange(0.1, mid, step / 2)[1:]
    hi = np.arange(mid, eta_max + step / 2, step)
    return np.unique(np.concatenate([lo, mid_part, hi]))


@dataclass
class ResolventBundle:
    """Per-frequency operators of the resolvent chain at one lambda."""

    space: SurrogateSpace
    lam: complex
    K: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.lam = complex(self.lam)
        if self.lam.real < -1e-15:
            raise ParameterError("resolvent chain requires Re lambda >= 0")
        self.K = self.space.flux_matrix(self.lam)

    def solve_resolvent(self, F):
        """(I - K)^{-1} F by direct dense solve."""
        n = self.K.shape[0]
        return np.linalg.solve(np.eye(n) - self.K, F)

    def series_resolvent(self, F, terms=200):
        out = np.zeros_like(F, dtype=complex)
        cur = F.astype(complex)
        for _ in range(terms):
            out += cur
            cur = self.K @ cur
        return out


@dataclass
class StationaryBranch:
    """Ingredients of the zero-frequency limit of the resolvent chain."""

    space: SurrogateSpace
    fd_step: float = 1e-3

    def __post_init__(self):
        from .boundary import assemble_MlambdaH

        sp, g = self.space.spec, self.space.grid
        per = perron_fixed_point(assemble_MlambdaH(sp, g, 0.0))
        self.perron = per
        self.nu_prime = nu_prime_zero(sp, g, per)
        self.P0 = np.outer(per.flux, np.ones(g.n_angle))
        h = self.fd_step
        P1 = self._projection(h)
        P2 = self._projection(2 * h)
        self.P0_prime = (-3.0 * self.P0 + 4.0 * P1 - P2) / (2 * h)
        self.K0 = self.space.flux_matrix(0.0).real

    def _projection(self, lam):
        e = leading_eigenvalue(self.space.spec, self.space.grid, lam)
        return np.real_if_close(np.outer(e.right, e.left) / (e.left @ e.right))

    def phi_zero(self, F0, F0_lam_prime):
        """Zero-frequency flux limit for zero-mean data.

        Solves the chain with the stationary direction removed and adds the
        derivative correction of the collapsing eigen-branch.
        """
        n = self.K0.shape[0]
        deflated = self.K0 @ (np.eye(n) - self.P0)
        a = np.linalg.solve(np.eye(n) - deflated, F0)
        corr = self.P0_prime @ F0 + self.P0 @ F0_lam_prime
        return a - corr / self.nu_prime


@dataclass
class BoundaryFunctionSample:
    """Norm record of the remainder boundary function over the frequency grid."""

    etas: np.ndarray
    norms: np.ndarray
    deriv_norms: np.ndarray
    n_tail: int
    zero_mean: bool
    theta_etas: np.ndarray = None
    theta_coarse: np.ndarray = None  # order-N_H derivative on a reduced grid

    def peak(self) -> float:
        return float(np.max(self.norms))

    def tail_fraction(self) -> float:
        """Last-decade tail level relative to the peak."""
        cut = self.etas >= 0.75 * self.etas[-1]
        return float(np.max(self.norms[cut]) / self.peak())


class RemainderChain:
    """Evaluates the remainder boundary function and its derivative at one
    frequency, with the zero-frequency branch for zero-mean data."""

    def __init__(self, space: SurrogateSpace, n_tail: int, f_masses, branch: StationaryBranch = None):
        self.space = space
        self.n_tail = int(n_tail)
        self.f = np.asarray(f_masses, float)
        self.rho_f = float(np.sum(self.f))
        self.branch = branch
        self.t_exit = space.t_exit

    def _branch(self) -> StationaryBranch:
        if self.branch is None:
            self.branch = StationaryBranch(self.space)
        return self.branch

    def flux_phi(self, eta, ws=None):
        """Flux vector of the solved resolvent chain at i eta (and its
        frequency derivative where defined)."""
        sp = self.space
        if eta == 0.0:
            if abs(self.rho_f) > 1e-10 * np.sum(np.abs(self.f)):
                raise ZeroMeanRequiredError(
                    "zero-frequency branch requires a zero-mean datum"
                )
            br = self._branch()
            F0 = sp.flux_source(self.f, 0.0).real
            F0p_lam = (-1j) * sp.flux_source(self.f, 0.0, time_weight=1)
            return br.phi_zero(F0, F0p_lam.real), None
        lam = 1j * eta
        K = sp.flux_matrix(lam)
        n = K.shape[0]
        A = np.eye(n) - K
        if ws is not None:
            F0 = sp.flux_source_ws(self.f, ws)
            F0p = sp.flux_source_ws(self.f, ws, time_weight=1)
        else:
            F0 = sp.flux_source(self.f, lam)
            F0p = sp.flux_source(self.f, lam, time_weight=1)
        phi = np.linalg.solve(A, F0)
        Kp = sp.flux_matrix(lam, deriv=1)
        phi_p = np.linalg.solve(A, Kp @ phi + F0p)
        return phi, phi_p

    def boundary_function(self, eta, want_deriv=True, ws=None):
        """(Psi_n(eta) f, d/d eta Psi_n(eta) f) as phase-cell mass vectors."""
        sp = self.space
        if ws is None:
            ws = sp.freq_workspace(eta)
        phi, phi_p = self.flux_phi(eta, ws)
        lam = 1j * eta
        K = sp.flux_matrix(lam)
        w = phi.astype(complex)
        if want_deriv and phi_p is not None:
            Kp = sp.flux_matrix(lam, deriv=1)
            wp = phi_p.astype(complex)
            for _ in range(self.n_tail):
                wp = Kp @ w + K @ wp
                w = K @ w
            return sp.lift_pair_ws(w, wp, ws)
        for _ in range(self.n_tail):
            w = K @ w
        psi, _ = sp.lift_pair_ws(w, None, ws)
        return psi, None

    def hermitian_defect(self, eta):
        """Relative defect of psi(-eta) against the conjugate of psi(eta)."""
        p_pos, _ = self.boundary_function(abs(eta), want_deriv=False)
        p_neg, _ = self.boundary_function(-abs(eta), want_deriv=False)
        return float(
            np.sum(np.abs(p_neg - np.conj(p_pos))) / max(np.sum(np.abs(p_pos)), 1e-300)
        )


def upsilon_n(space: SurrogateSpace, n_tail: int, f_masses, lam, form="series", branch=None, terms=200):
    """Laplace transform of the bounce remainder past order ``n_tail``.

    form 'series': solved resolvent tail; 'difference': full-resolvent
    difference minus the leading chain terms.  Both live on the phase grid.
    """
    lam = complex(lam)
    sp = space
    f = np.asarray(f_masses, float)
    if form == "series":
        if lam.real == 0.0:
            chain = RemainderChain(space, n_tail, f, branch)
            psi, _ = chain.boundary_function(lam.imag, want_deriv=False)
            return psi
        bundle = ResolventBundle(space, lam)
        F0 = sp.flux_source(f, lam)
        tail = np.linalg.matrix_power(bundle.K, n_tail) @ bundle.solve_resolvent(F0)
        return sp.lift_departures(tail, lam)
    if form != "difference":
        raise ParameterError("form must be series|difference")
    if lam == 0.0:
        raise ParameterError("difference form is singular at lambda = 0")
    bundle = ResolventBundle(space, lam)
    F0 = sp.flux_source(f, lam)
    # R(lam, full) f - R(lam, absorbing) f - sum_{k < n} chain terms
    r_free = sp.spread_R(f, lam)
    full = r_free + sp.lift_departures(bundle.solve_resolvent(F0), lam)
    out = full - r_free
    term = F0.astype(complex)
    for _ in range(n_tail):
        out = out - sp.lift_departures(term, lam)
        term = bundle.K @ term
    return out


def resolvent_full(space: SurrogateSpace, f_masses, lam, via="solve", terms=200):
    """Resolvent of the full generator applied to a phase datum."""
    bundle = ResolventBundle(space, lam)
    F0 = space.flux_source(np.asarray(f_masses, float), lam)
    if via == "solve":
        flux = bundle.solve_resolvent(F0)
    elif via == "series":
        flux = bundle.series_resolvent(F0, terms)
    else:
        raise ParameterError("via must be solve|series")
    return space.spread_R(f_masses, lam) + space.lift_departures(flux, lam)


def phi_eta(space: SurrogateSpace, f_masses, eta, branch=None):
    """Flux vector of the solved chain at i eta (zero-frequency branch for
    zero-mean data)."""
    chain = RemainderChain(space, 0, f_masses, branch)
    phi, _ = chain.flux_phi(float(eta))
    return phi


def psi_n_profile(space: SurrogateSpace, n_tail, f_masses, etas=None, branch=None,
                  theta_every=0, coarse_shape=(4, 8, 8, 6)) -> BoundaryFunctionSample:
    """Norms of the remainder boundary function over the frequency grid.

    ``theta_every > 0`` additionally stores the frequency derivative on a
    coarse phase binning every that many nodes (modulus-of-continuity
    diagnostics).
    """
    if etas is None:
        etas = default_eta_grid()
    chain = RemainderChain(space, n_tail, f_masses, branch)
    norms = np.empty(len(etas))
    dnorms = np.empty(len(etas))
    th_etas, th_vals = [], []
    reducer = _coarse_reducer(space.phase.shape, coarse_shape)
    for i, eta in enumerate(etas):
        want = eta != 0.0
        psi, dpsi = chain.boundary_function(eta, want_deriv=want)
        norms[i] = np.sum(np.abs(psi))
        dnorms[i] = np.sum(np.abs(dpsi)) if dpsi is not None else np.nan
        if theta_every and (i % theta_every == 0) and dpsi is not None:
            th_etas.append(eta)
            th_vals.append(reducer(dpsi))
    i0 = np.where(etas == 0.0)[0]
    if len(i0) and len(etas) > 2:
        # derivative norm at the origin from its neighbors (the branch value
        # exists but is not assembled analytically there)
        k = i0[0]
        dnorms[k] = dnorms[k + 1] if k + 1 < len(etas) else dnorms[k - 1]
    return BoundaryFunctionSample(
        etas=np.asarray(etas, float),
        norms=norms,
        deriv_norms=dnorms,
        n_tail=n_tail,
        zero_mean=abs(chain.rho_f) <= 1e-10 * np.sum(np.abs(chain.f)),
        theta_etas=np.asarray(th_etas),
        theta_coarse=np.asarray(th_vals) if th_vals else None,
    )


def _coarse_reducer(shape, coarse_shape):
    maps = []
    for full, coarse in zip(shape, coarse_shape):
        idx = np.minimum((np.arange(full) * coarse) // full, coarse - 1)
        maps.append(idx)

    def reduce(arr):
        out = np.zeros(coarse_shape, dtype=arr.dtype)
        np.add.at(
            out,
            (maps[0][:, None, None, None], maps[1][None, :, None, None],
             maps[2][None, None, :, None], maps[3][None, None, None, :]),
            arr,
        )
        return out

    return reduce


def _filon_linear_weights(eta0, eta1, t):
    """Exact integral of e^{i eta t} times the linear hat on [eta0, eta1]:
    returns (w0, w1) with int = w0 f0 + w1 f1."""
    h = eta1 - eta0
    if abs(t) * h < 1e-8:
        return 0.5 * h * np.exp(1j * eta0 * t), 0.5 * h * np.exp(1j * eta1 * t)
    it = 1j * t
    c0 = np.exp(it * eta0)
    c1 = np.exp(it * eta1)
    A = (c1 - c0) / it
    B = (h * c1) / it - (c1 - c0) / (it * it)
    w1 = B / h
    w0 = A - w1
    return w0, w1


@dataclass
class FourierInversion:
    t_list: np.ndarray
    direct: np.ndarray  # (n_t, *phase shape) real
    by_parts: np.ndarray
    hermitian_defect: float  # symmetry defect that certifies a real output
    sample: BoundaryFunctionSample
    gain_order: int


def fourier_invert(space: SurrogateSpace, n_tail, f_masses, t_list, etas=None,
                   gain_order=1, branch=None, tail_tol=1e-3) -> FourierInversion:
    """Time-domain remainder from the boundary function by oscillatory
    quadrature (piecewise-linear Filon).

    Returns both the direct form and the integrated-by-parts form whose
    integrand is the ``gain_order``-th frequency derivative; for real data
    the negative frequencies are folded by conjugate symmetry.
    """
    if etas is None:
        etas = default_eta_grid()
    etas = np.asarray(etas, float)
    t_list = np.asarray(t_list, float)
    chain = RemainderChain(space, n_tail, f_masses, branch)
    shape = space.phase.shape
    direct = np.zeros((len(t_list),) + shape, dtype=complex)
    byparts = np.zeros_like(direct)
    prev = None
    norms = np.empty(len(etas))
    dnorms = np.empty(len(etas))
    for i, eta in enumerate(etas):
        psi, dpsi = chain.boundary_function(eta, want_deriv=True)
        norms[i] = np.sum(np.abs(psi))
        dnorms[i] = np.sum(np.abs(dpsi)) if dpsi is not None else np.nan
        if prev is not None:
            e0, p0, d0 = prev
            if d0 is None:
                d0 = dpsi  # origin node: continue the derivative from the right
            for q, t in enumerate(t_list):
                w0, w1 = _filon_linear_weights(e0, eta, t)
                direct[q] += w0 * p0 + w1 * psi
                byparts[q] += w0 * d0 + w1 * dpsi
        prev = (eta, psi, dpsi)
    # conjugate fold of the negative half-line and normalization; the
    # integrated-by-parts prefactor is (i/t)^k (each integration by parts of
    # exp(i eta t) contributes a factor i/t)
    direct_real = direct.real / np.pi
    gain = gain_order
    out_by = np.empty_like(direct_real)
    for q, t in enumerate(t_list):
        if t <= 0:
            out_by[q] = np.nan
            continue
        factor = (1j / t) ** gain
        out_by[q] = (factor * byparts[q]).real / np.pi
    sample = BoundaryFunctionSample(
        etas=etas, norms=norms, deriv_norms=dnorms, n_tail=n_tail,
        zero_mean=abs(chain.rho_f) <= 1e-10 * np.sum(np.abs(chain.f)),
    )
    if sample.tail_fraction() > tail_tol:
        raise TailTooLargeError(
            f"boundary-function tail {sample.tail_fraction():.2e} above {tail_tol:.0e}; "
            f"suggest eta_max about {2 * etas[-1]:g}"
        )
    herm = chain.hermitian_defect(0.5 * etas[-1])
    return FourierInversion(
        t_list=t_list,
        direct=direct_real,
        by_parts=out_by,
        hermitian_defect=herm,
        sample=sample,
        gain_order=gain,
    )


def theta_modulus(sample: BoundaryFunctionSample, s_list):
    """Empirical modulus of continuity of the stored coarse derivative."""
    if sample.theta_coarse is None:
        raise ParameterError("profile was built without derivative storage")
    etas = sample.theta_etas
    vals = sample.theta_coarse.reshape(len(etas), -1)
    out = []
    for s in np.asarray(s_list, float):
        best = 0.0
        for i in range(len(etas)):
            for j in range(i + 1, len(etas)):
                if etas[j] - etas[i] > s:
                    break
                best = max(best, float(np.sum(np.abs(vals[j] - vals[i]))))
        out.append(best)
    return np.array(out)


# ---------------------------------------------------------------------------
# time-domain twin


@dataclass
class TimeDomainRemainder:
    """Bounce-resolved surrogate evolution for remainder comparisons."""

    space: SurrogateSpace
    f_masses: np.ndarray
    n_tail: int
    t_max: float
    dt: float = 0.005

    def __post_init__(self):
        self.classes, self.total = self.space.march(
            self.f_masses, self.t_max, self.dt, self.n_tail
        )

    def inflight_total(self, t):
        free = self.space.inflight_initial(self.f_masses, t)
        return free + self.space.inflight_from_departures(self.total, t, self.dt)

    def inflight_class(self, k, t):
        if k == 0:
            return self.space.inflight_initial(self.f_masses, t)
        return self.space.inflight_from_departures(self.classes[k - 1], t, self.dt)

    def remainder(self, t):
        """Mass past the first ``n_tail`` bounce classes at time t."""
        out = self.inflight_total(t)
        out -= self.space.inflight_initial(self.f_masses, t)
        for k in range(1, self.n_tail + 1):
            out -= self.space.inflight_from_departures(self.classes[k - 1], t, self.dt)
        return out
