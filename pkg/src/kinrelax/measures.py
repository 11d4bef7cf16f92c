"""Velocity and boundary measures, quadrature grids and integration identities.

Speed quadratures use Gauss-Legendre panels with geometric refinement toward
zero speed, because every weighted norm in the hierarchy carries a
``max(1, |v|^-s)`` factor that concentrates mass there.  Direction
quadrature absorbs the flux factor ``|sigma . n|`` exactly by integrating in
its antiderivative variable (``sin psi`` on the disk, ``cos^2`` on the ball).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss

from .geometry import Domain, GeometryError, boundary_foot, exit_time

K_MAX = 4  # highest inverse-speed weight order kept in grid ledgers


def varpi(s, rho):
    """Inverse-speed weight max(1, rho^-s)."""
    rho = np.asarray(rho, float)
    with np.errstate(divide="ignore"):
        return np.maximum(1.0, rho ** (-float(s)))


@lru_cache(maxsize=64)
def _gauss(n: int):
    return leggauss(n)


def gauss_panel(a: float, b: float, n: int):
    x, w = _gauss(n)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return mid + half * x, half * w


def default_rho_max(theta_max: float = 1.0) -> float:
    """Speed cutoff leaving Maxwellian tail mass below 1e-13."""
    return 8.0 * np.sqrt(theta_max)


def speed_panels(rho_max, split=1.0, n_small=8, ratio=2.0):
    """Panel edges: geometric refinement below ``split``, dyadic above."""
    edges = [0.0, split * ratio ** (-n_small)]
    for k in range(n_small - 1, -1, -1):
        edges.append(split * ratio ** (-k))
    hi = split
    while hi < rho_max * (1 - 1e-12):
        hi = min(hi * 2.0, rho_max)
        edges.append(hi)
    return np.array(edges)


@dataclass(frozen=True)
class VelocityMeasure:
    """Orthogonally invariant velocity measure m(dv) = |v|-radial Lebesgue.

    Radial image measure: m0(drho) = |S^{d-1}| rho^{d-1} drho.  Quadrature
    nodes carry both the plain drho weights and the radial ones.
    """

    dim: int = 2
    rho_max: float = 8.0
    n_speed: int = 48
    split: float = 1.0
    n_small_panels: int = 8
    refine_ratio: float = 2.0
    nodes: np.ndarray = field(init=False, repr=False)
    w_plain: np.ndarray = field(init=False, repr=False)
    w_radial: np.ndarray = field(init=False, repr=False)
    panel_edges: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise GeometryError("dim must be 2 or 3")
        edges = speed_panels(
            self.rho_max, self.split, self.n_small_panels, self.refine_ratio
        )
        n_panels = len(edges) - 1
        n_small = self.n_small_panels + 1
        # importance pattern: near-zero panels see rescaled smooth integrands
        # and need few nodes; the order-one panels carry the Gaussian bulk.
        imp = np.empty(n_panels)
        for k in range(n_small):
            depth = n_small - 1 - k  # 0 for [split/2, split]
            imp[k] = {0: 8.0, 1: 6.0, 2: 5.0, 3: 4.0}.get(depth, 3.0)
        imp[n_small:] = 10.0
        counts = np.maximum(2, np.rint(imp * self.n_speed / imp.sum()).astype(int))
        xs, ws = [], []
        for k in range(n_panels):
            x, w = gauss_panel(edges[k], edges[k + 1], int(counts[k]))
            xs.append(x)
            ws.append(w)
        nodes = np.concatenate(xs)
        w_plain = np.concatenate(ws)
        object.__setattr__(self, "panel_edges", edges)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "w_plain", w_plain)
        object.__setattr__(self, "w_radial", nodes ** (self.dim - 1) * w_plain)

    @property
    def sphere_surface(self) -> float:
        return 2.0 * np.pi if self.dim == 2 else 4.0 * np.pi

    def radial_mass(self) -> float:
        """Quadrature value of int_0^rho_max rho^{d-1} drho."""
        return float(np.sum(self.w_radial))

    def radial_integral(self, fn) -> float:
        """int fn(rho) rho^{d-1} drho over [0, rho_max]."""
        return float(np.sum(self.w_radial * fn(self.nodes)))

    def velocity_mass(self, radial_fn) -> float:
        """int radial_fn(|v|) m(dv) for a radial integrand."""
        return self.sphere_surface * self.radial_integral(radial_fn)


def direction_grid(dim: int, n: int):
    """Full-sphere direction nodes and weights (sum of weights = |S^{d-1}|)."""
    if dim == 2:
        ang = (np.arange(n) + 0.5) * (2 * np.pi / n)
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        return dirs, np.full(n, 2 * np.pi / n)
    mu, wmu = _gauss(n)
    n_az = 2 * n
    az = (np.arange(n_az) + 0.5) * (2 * np.pi / n_az)
    st = np.sqrt(1 - mu**2)
    dirs = np.stack(
        [
            np.outer(st, np.cos(az)).ravel(),
            np.outer(st, np.sin(az)).ravel(),
            np.repeat(mu, n_az),
        ],
        axis=-1,
    )
    w = np.repeat(wmu, n_az) * (2 * np.pi / n_az)
    return dirs, w


def hemisphere_flux_nodes(dim: int, n: int, refine_outer: bool = False):
    """Local-frame direction nodes with the flux factor |sigma.n| absorbed.

    Gauss-Legendre panels directly in the local angle, with cos(angle)
    folded into the weight: spectral accuracy for integrands smooth in the
    angle.  Near-normal directions get dyadic panels (they are the only
    rays reaching the center of a disk); ``refine_outer`` additionally
    subdivides the near-grazing range for integrands with kinks there.
    Returns (angle nodes, weights, direction components in the local frame)
    such that ``sum w_j g(sigma_j) = int_{sigma.n>0} |sigma.n| g dsigma``.
    """
    if dim == 2:
        if refine_outer:
            sin_edges = np.array([0.0, 1 / 16, 1 / 8, 1 / 4, 1 / 2, 3 / 4, 7 / 8, 1.0])
            alloc = np.array([2.0, 2.0, 3.0, 4.0, 4.0, 4.0, 4.0])
        else:
            sin_edges = np.array([0.0, 1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0])
            alloc = np.array([2.0, 2.0, 3.0, 4.0, 8.0])
        half = max(n // 2, 10)
        counts = np.maximum(2, np.rint(alloc * half / alloc.sum()).astype(int))
        psi_parts, w_parts = [], []
        for (a, b), m in zip(zip(sin_edges[:-1], sin_edges[1:]), counts):
            x, w = gauss_panel(np.arcsin(a), np.arcsin(b), int(m))
            psi_parts.append(x)
            w_parts.append(w)
        psi_half = np.concatenate(psi_parts)
        w_half = np.concatenate(w_parts)
        psi = np.concatenate([-psi_half[::-1], psi_half])
        w = np.concatenate([w_half[::-1], w_half])
        return psi, w * np.cos(psi), (np.cos(psi), np.sin(psi))
    th, wth = gauss_panel(0.0, np.pi / 2, n)
    n_az = 2 * n
    az = (np.arange(n_az) + 0.5) * (2 * np.pi / n_az)
    W = np.repeat(wth * np.cos(th) * np.sin(th), n_az) * (2 * np.pi / n_az)
    CT = np.repeat(np.cos(th), n_az)
    ST = np.repeat(np.sin(th), n_az)
    AZ = np.tile(az, n)
    return (np.repeat(th, n_az), AZ), W, (CT, ST * np.cos(AZ), ST * np.sin(AZ))


@dataclass
class BoundaryGrid:
    """Tensor quadrature grid on the outgoing/incoming boundary sets (disk).

    Cells are (boundary node i, local direction j, speed l).  The local
    direction angle psi is measured from the normal (outward for the
    outgoing side, inward for the incoming side) with positive tangential
    component; chord transport preserves (j, l) exactly on the disk.
    """

    domain: Domain
    n_angle: int = 64
    n_dir: int = 32
    measure: VelocityMeasure = None  # type: ignore[assignment]
    dir_refine_outer: bool = False

    def __post_init__(self):
        if self.domain.dim != 2:
            raise GeometryError("BoundaryGrid tensor transport is disk-only")
        if self.measure is None:
            self.measure = VelocityMeasure(dim=2)
        R = self.domain.radius
        self.h_angle = 2 * np.pi / self.n_angle
        self.alphas = np.arange(self.n_angle) * self.h_angle
        self.points = self.domain.boundary_point(self.alphas)
        self.w_angle = np.full(self.n_angle, R * self.h_angle)
        self.psi, self.w_dir, _ = hemisphere_flux_nodes(2, self.n_dir, self.dir_refine_outer)
        self.n_dir = len(self.psi)  # panelized quadrature may adjust the count
        rho = self.measure.nodes
        # mu weight per cell: |v.n| pi(dx) m(dv) = rho^d cos(psi) dpsi drho dx
        self.weights = (
            self.w_angle[:, None, None]
            * self.w_dir[None, :, None]
            * (rho**self.measure.dim * self.measure.w_plain)[None, None, :]
        )
        # chord data shared by both sides (disk symmetry)
        self.tau = 2.0 * R * np.cos(self.psi)[:, None] / rho[None, :]
        self.shift = np.pi - 2.0 * self.psi  # exit-angle offset per direction
        self.shift_cells = np.rint(self.shift / self.h_angle).astype(int) % self.n_angle
        self.varpi = np.stack(
            [varpi(k, rho) for k in range(K_MAX + 1)]
        )  # (K_MAX+1, n_speed)

    @property
    def shape(self):
        return (self.n_angle, self.n_dir, len(self.measure.nodes))

    @property
    def n_cells(self):
        return self.n_angle * self.n_dir * len(self.measure.nodes)

    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    def analytic_mass(self) -> float:
        d = self.measure.dim
        rad = self.measure.rho_max ** (d + 1) / (d + 1)
        return self.domain.surface * 2.0 * rad

    def cell_norm(self, values, weight_order: int = 0) -> float:
        """mu-weighted L1 norm of nodal values, with inverse-speed weight."""
        w = self.weights * self.varpi[weight_order][None, None, :]
        return float(np.sum(np.abs(values) * w))

    def mass_of(self, values) -> float:
        return float(np.sum(values * self.weights))

    def outgoing_direction(self, i, j):
        """Global unit direction for outgoing cell (i, j)."""
        ang = self.alphas[i] + self.psi[j]
        return np.stack([np.cos(ang), np.sin(ang)], axis=-1)

    def incoming_direction(self, i, j):
        """Global unit direction for incoming cell (i, j)."""
        ang = self.alphas[i] + np.pi - self.psi[j]
        return np.stack([np.cos(ang), np.sin(ang)], axis=-1)

    def fingerprint(self) -> str:
        m = self.measure
        return (
            f"disk R={self.domain.radius:g} angles={self.n_angle} "
            f"dirs={self.n_dir} speeds={len(m.nodes)} rho_max={m.rho_max:g}"
        )


# ---------------------------------------------------------------------------
# integration identities


def phase_integral_via_boundary(grid: BoundaryGrid, h, side="outgoing", n_chord=24, chord_integral=None):
    """Phase-space integral of h computed through boundary chords.

    ``side='outgoing'`` integrates backward chords from the outgoing set,
    ``side='incoming'`` forward chords from the incoming set; both represent
    the same phase integral.  ``h(x, v)`` must accept batched arrays;
    ``chord_integral(z, v, tau)``, when given, supplies the exact inner
    line integral instead of Gauss quadrature.
    """
    gx, gw = _gauss(n_chord)
    total = 0.0
    rho = grid.measure.nodes
    for j in range(grid.n_dir):
        tau = grid.tau[j]  # (n_speed,)
        if side == "outgoing":
            dirs = grid.outgoing_direction(np.arange(grid.n_angle), j)
            sgn = -1.0
        elif side == "incoming":
            dirs = grid.incoming_direction(np.arange(grid.n_angle), j)
            sgn = 1.0
        else:
            raise ValueError("side must be outgoing|incoming")
        v = dirs[:, None, :] * rho[None, :, None]  # (n_angle, n_speed, 2)
        z = grid.points[:, None, :] + 0.0 * v
        if chord_integral is not None:
            inner = chord_integral(z, sgn * v, tau[None, :])
        else:
            s = 0.5 * tau[None, :, None] * (gx[None, None, :] + 1.0)
            ws = 0.5 * tau[None, :, None] * gw[None, None, :]
            pts = z[:, :, None, :] + sgn * s[..., None] * v[:, :, None, :]
            vv = np.broadcast_to(v[:, :, None, :], pts.shape)
            inner = np.sum(h(pts, vv) * ws, axis=-1)
        total += float(np.sum(grid.weights[:, j, :] * inner))
    return total


def direct_phase_integral(domain: Domain, measure: VelocityMeasure, h, n_r=48, n_ang=64, n_dirs=64):
    """Reference tensor quadrature of int h dx m(dv) over the phase space."""
    if domain.dim != 2:
        raise GeometryError("direct phase quadrature implemented for the disk")
    r, wr = gauss_panel(0.0, domain.radius, n_r)
    ang = (np.arange(n_ang) + 0.5) * (2 * np.pi / n_ang)
    dirs, wd = direction_grid(2, n_dirs)
    rho = measure.nodes
    x = np.stack(
        [np.outer(r, np.cos(ang)).ravel(), np.outer(r, np.sin(ang)).ravel()], axis=-1
    ) + np.asarray(domain.center)
    wx = np.outer(r * wr, np.full(n_ang, 2 * np.pi / n_ang)).ravel()
    v = dirs[:, None, :] * rho[None, :, None]
    wv = wd[:, None] * (rho ** (measure.dim - 1) * measure.w_plain)[None, :]
    total = 0.0
    for q in range(len(dirs)):
        pts = np.broadcast_to(x[:, None, :], (len(x), len(rho), 2))
        vv = np.broadcast_to(v[q][None, :, :], pts.shape)
        total += float(np.sum(wx[:, None] * wv[q][None, :] * h(pts, vv)))
    return total


def pushforward_identity_check(grid: BoundaryGrid, psi):
    """Both sides of the incoming/outgoing pushforward identity.

    lhs integrates psi over the incoming set, rhs pulls psi back through
    the exact backward foot from the outgoing set.  Returns (lhs, rhs,
    relative defect).
    """
    rho = grid.measure.nodes
    lhs = 0.0
    rhs = 0.0
    for j in range(grid.n_dir):
        vin = grid.incoming_direction(np.arange(grid.n_angle), j)
        v = vin[:, None, :] * rho[None, :, None]
        z = np.broadcast_to(grid.points[:, None, :], v.shape)
        lhs += float(np.sum(grid.weights[:, j, :] * psi(z, v)))
        vout = grid.outgoing_direction(np.arange(grid.n_angle), j)
        v2 = vout[:, None, :] * rho[None, :, None]
        # exact backward foot on the disk: angle alpha - (pi - 2 psi_j)
        foot_ang = grid.alphas[:, None] - grid.shift[j]
        foot = grid.domain.boundary_point(np.broadcast_to(foot_ang, v2.shape[:2]))
        rhs += float(np.sum(grid.weights[:, j, :] * psi(foot, v2)))
    defect = abs(lhs - rhs) / max(abs(lhs), 1e-300)
    return lhs, rhs, defect


def polar_integral(measure: VelocityMeasure, psi, n_dirs=64):
    """int psi(v) m(dv) via the radial/angular decomposition."""
    dirs, wd = direction_grid(measure.dim, n_dirs)
    rho = measure.nodes
    v = rho[:, None, None] * dirs[None, :, :]
    vals = psi(v)
    ang = np.sum(vals * wd[None, :], axis=1)
    return float(np.sum(measure.w_radial * ang))


def cartesian_velocity_integral(measure: VelocityMeasure, psi, n=96):
    """Reference tensor-Gauss quadrature of int psi(v) dv over the cutoff box."""
    a = measure.rho_max
    x, w = gauss_panel(-a, a, n)
    if measure.dim == 2:
        vx, vy = np.meshgrid(x, x, indexing="ij")
        v = np.stack([vx, vy], axis=-1)
        ww = np.outer(w, w)
        inside = np.sum(v * v, axis=-1) <= a * a
        return float(np.sum(ww * psi(v) * inside))
    vx, vy, vz = np.meshgrid(x, x, x, indexing="ij")
    v = np.stack([vx, vy, vz], axis=-1)
    ww = w[:, None, None] * w[None, :, None] * w[None, None, :]
    inside = np.sum(v * v, axis=-1) <= a * a
    return float(np.sum(ww * psi(v) * inside))


def jacobian(domain: Domain, x, y):
    """Hemisphere-to-surface transfer factor between boundary points.

    Vanishes outside the visible set; symmetric in (x, y) by its explicit
    formula.  Coincident points are rejected.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    diff = x - y
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    if np.any(dist == 0.0):
        raise GeometryError("jacobian undefined for coincident points")
    nx = domain.normal(x)
    ny = domain.normal(y)
    dn_x = np.sum(diff * nx, axis=-1)
    dn_y = np.sum(diff * ny, axis=-1)
    visible = (dn_x > 0) & (dn_y < 0)
    d = domain.dim
    return np.where(visible, np.abs(dn_x) * np.abs(dn_y) / dist ** (d + 1), 0.0)


def sphere_to_boundary(domain: Domain, x, phi, G, n=256):
    """Both sides of the hemisphere-to-surface change of variables at x.

    lhs: flux-weighted hemisphere integral of phi(chord time) G(foot);
    rhs: surface integral of G(y) phi(|x-y|) J(x, y).  Returns (lhs, rhs,
    relative defect).
    """
    x = np.asarray(x, float)
    n_vec = domain.normal(x)
    if domain.dim == 2:
        psi, w, _ = hemisphere_flux_nodes(2, n)
        t_vec = np.array([-n_vec[1], n_vec[0]])
        sig = np.cos(psi)[:, None] * n_vec + np.sin(psi)[:, None] * t_vec
        foot, tau = boundary_foot(domain, np.broadcast_to(x, sig.shape), sig)
        lhs = float(np.sum(w * phi(tau) * G(foot)))
        # surface side: parametrize y by angular offset from x
        ax = np.arctan2(x[1] - domain.center[1], x[0] - domain.center[0])
        del_, wd = gauss_panel(0.0, 2 * np.pi, n)
        y = domain.boundary_point(ax + del_)
        J = jacobian(domain, np.broadcast_to(x, y.shape), y)
        dist = np.sqrt(np.sum((x - y) ** 2, axis=-1))
        rhs = float(np.sum(wd * domain.radius * G(y) * phi(dist) * J))
    else:
        (_, _), w, comps = hemisphere_flux_nodes(3, n // 4)
        e1 = np.array([1.0, 0.0, 0.0])
        if abs(n_vec @ e1) > 0.9:
            e1 = np.array([0.0, 1.0, 0.0])
        t1 = e1 - (e1 @ n_vec) * n_vec
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(n_vec, t1)
        sig = (
            comps[0][:, None] * n_vec
            + comps[1][:, None] * t1
            + comps[2][:, None] * t2
        )
        foot, tau = boundary_foot(domain, np.broadcast_to(x, sig.shape), sig)
        lhs = float(np.sum(w * phi(tau) * G(foot)))
        # surface side: polar angle around x as pole
        th, wth = gauss_panel(0.0, np.pi, n // 2)
        n_az = n
        az = (np.arange(n_az) + 0.5) * (2 * np.pi / n_az)
        y = (
            np.cos(th)[:, None, None] * n_vec
            + np.sin(th)[:, None, None]
            * (np.cos(az)[None, :, None] * t1 + np.sin(az)[None, :, None] * t2)
        ) * domain.radius + np.asarray(domain.center)
        R = domain.radius
        wsurf = (R**2 * np.sin(th) * wth)[:, None] * (2 * np.pi / n_az)
        J = jacobian(domain, np.broadcast_to(x, y.shape), y)
        dist = np.sqrt(np.sum((x - y) ** 2, axis=-1))
        rhs = float(np.sum(wsurf * G(y) * phi(dist) * J))
    defect = abs(lhs - rhs) / max(abs(lhs), 1e-300)
    return lhs, rhs, defect
