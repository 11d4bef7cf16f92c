"""Tensor phase-space grid on the disk: polar position cells times
(global direction, speed) velocity cells.

Cells carry masses.  Every transport-type operation runs over precomputed
ray tables: for each (position cell, direction) the exact breakpoints where
the centroid ray crosses cell boundaries, so line integrals along chords
are evaluated in closed form per cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Domain, GeometryError
from .measures import gauss_panel, speed_panels, varpi


def speed_cell_edges(rho_max: float, n_rho: int, split: float = 1.0, n_small: int = 8):
    """Speed cell edges: geometric panels near zero, subdivided dyadic above."""
    base = speed_panels(rho_max, split, n_small)
    n_large = len(base) - 1 - (n_small + 1)
    extra = max(1, int(np.ceil((n_rho - (n_small + 1)) / max(n_large, 1))))
    edges = list(base[: n_small + 2])
    for k in range(n_small + 1, len(base) - 1):
        a, b = base[k], base[k + 1]
        edges.extend(np.linspace(a, b, extra + 1)[1:])
    return np.array(edges)


@dataclass
class PhaseGrid:
    """Polar position cells x (direction, speed) velocity cells on a disk."""

    domain: Domain
    n_r: int = 16
    n_ang: int = 32
    n_omega: int = 32
    n_rho: int = 16
    rho_max: float = 8.0
    rho_edges: np.ndarray = None  # explicit speed cells (e.g. measure panels)

    def __post_init__(self):
        if self.domain.dim != 2:
            raise GeometryError("phase grid implemented for the disk")
        R = self.domain.radius
        self.r_edges = np.linspace(0.0, R, self.n_r + 1)
        self.ang_edges = np.arange(self.n_ang + 1) * (2 * np.pi / self.n_ang)
        self.omega_edges = np.arange(self.n_omega + 1) * (2 * np.pi / self.n_omega)
        if self.rho_edges is None:
            self.rho_edges = speed_cell_edges(self.rho_max, self.n_rho)
        else:
            self.rho_edges = np.asarray(self.rho_edges, float)
            self.rho_max = float(self.rho_edges[-1])
        self.n_rho = len(self.rho_edges) - 1
        r1, r2 = self.r_edges[:-1], self.r_edges[1:]
        self.r_cent = (2.0 / 3.0) * (r2**3 - r1**3) / (r2**2 - r1**2)
        self.ang_cent = 0.5 * (self.ang_edges[:-1] + self.ang_edges[1:])
        self.omega_cent = 0.5 * (self.omega_edges[:-1] + self.omega_edges[1:])
        a, b = self.rho_edges[:-1], self.rho_edges[1:]
        d = self.domain.dim
        self.rho_m0 = (b**d - a**d) / d  # int rho^{d-1} drho per cell
        self.rho_cent = (2.0 / 3.0) * (b**3 - a**3) / (b**2 - a**2)
        self.pos_vol = np.outer(
            0.5 * (r2**2 - r1**2), np.diff(self.ang_edges)
        )  # (n_r, n_ang)
        self.vel_mass = np.outer(np.diff(self.omega_edges), self.rho_m0)
        # cell-averaged inverse-speed weights (m0-weighted; +inf when the
        # cell touches zero and the weight is not integrable there)
        self.varpi_bar = np.empty((5, self.n_rho))
        for s in range(5):
            self.varpi_bar[s] = self._avg_varpi(s)

    def _avg_varpi(self, s):
        d = self.domain.dim
        a, b = self.rho_edges[:-1], self.rho_edges[1:]
        out = np.empty(self.n_rho)
        for i in range(self.n_rho):
            lo, hi = a[i], b[i]
            if hi <= 1.0:
                p = d - 1 - s
                if lo == 0.0 and p <= -1:
                    out[i] = np.inf
                    continue
                if p == -1:
                    num = np.log(hi / lo)
                else:
                    num = (hi ** (p + 1) - max(lo, 0.0) ** (p + 1)) / (p + 1)
                out[i] = num / self.rho_m0[i]
            elif lo >= 1.0:
                out[i] = 1.0
            else:
                p = d - 1 - s
                num = (1.0 - lo ** (p + 1)) / (p + 1) + (hi**d - 1.0) / d
                out[i] = num / self.rho_m0[i]
        return out

    @property
    def shape(self):
        return (self.n_r, self.n_ang, self.n_omega, self.n_rho)

    @property
    def n_cells(self):
        return int(np.prod(self.shape))

    def zeros(self):
        return np.zeros(self.shape)

    def position_centroids(self):
        """Cartesian centroids, shape (n_r, n_ang, 2)."""
        return np.stack(
            [
                np.outer(self.r_cent, np.cos(self.ang_cent)),
                np.outer(self.r_cent, np.sin(self.ang_cent)),
            ],
            axis=-1,
        ) + np.asarray(self.domain.center)

    def bin_position(self, x):
        x = np.asarray(x, float) - self.domain.center
        r = np.sqrt(np.sum(x * x, axis=-1))
        ir = np.clip(np.searchsorted(self.r_edges, r, "right") - 1, 0, self.n_r - 1)
        ang = np.arctan2(x[..., 1], x[..., 0]) % (2 * np.pi)
        ia = np.clip((ang / (2 * np.pi) * self.n_ang).astype(int), 0, self.n_ang - 1)
        return ir, ia

    def bin_velocity(self, omega_angle, rho):
        iw = (np.asarray(omega_angle) % (2 * np.pi) / (2 * np.pi) * self.n_omega).astype(int)
        iw = np.clip(iw, 0, self.n_omega - 1)
        il = np.clip(np.searchsorted(self.rho_edges, rho, "right") - 1, 0, self.n_rho - 1)
        return iw, il

    def x_norm(self, masses, s=0):
        """Weighted L1 norm of a mass array; cells at zero speed with a
        divergent weight count only when they carry mass."""
        w = self.varpi_bar[s]
        m = np.abs(np.asarray(masses))
        contrib = m * w[None, None, None, :]
        contrib = np.where(m == 0.0, 0.0, contrib)
        return float(np.sum(contrib))

    def total_mass(self, masses):
        return float(np.sum(masses))

    def project(self, f, n_pos=3, n_vel=3):
        """Cell masses of a phase density f(x, v) by per-cell Gauss tensor
        quadrature (smooth integrands)."""
        out = np.zeros(self.shape)
        for ir in range(self.n_r):
            rq, wr = gauss_panel(self.r_edges[ir], self.r_edges[ir + 1], n_pos)
            for ia in range(self.n_ang):
                aq, wa = gauss_panel(self.ang_edges[ia], self.ang_edges[ia + 1], n_pos)
                X = np.stack(
                    [np.outer(rq, np.cos(aq)), np.outer(rq, np.sin(aq))], axis=-1
                ).reshape(-1, 2) + np.asarray(self.domain.center)
                WX = np.outer(rq * wr, wa).reshape(-1)
                for iw in range(self.n_omega):
                    oq, wo = gauss_panel(
                        self.omega_edges[iw], self.omega_edges[iw + 1], n_vel
                    )
                    for il in range(self.n_rho):
                        pq, wp = gauss_panel(
                            self.rho_edges[il], self.rho_edges[il + 1], n_vel
                        )
                        V = np.stack(
                            [
                                np.outer(pq, np.cos(oq)),
                                np.outer(pq, np.sin(oq)),
                            ],
                            axis=-1,
                        ).reshape(-1, 2)
                        WV = np.outer(pq ** (self.domain.dim - 1) * wp, wo).reshape(-1)
                        vals = f(X[:, None, :], V[None, :, :])
                        out[ir, ia, iw, il] = np.sum(WX[:, None] * WV[None, :] * vals)
        return out


def trace_ray(x0, u, length, r_edges, ang_edges, center=(0.0, 0.0)):
    """Breakpoints of the segment x0 + s u, s in [0, length], against the
    polar cell boundaries.  Returns (s_edges, ring_idx, ang_idx) per piece.
    """
    x0 = np.asarray(x0, float) - np.asarray(center, float)
    u = np.asarray(u, float)
    breaks = [0.0, length]
    b = x0 @ u
    c0 = x0 @ x0
    for re in r_edges[1:-1]:
        disc = b * b - (c0 - re * re)
        if disc > 0:
            rt = np.sqrt(disc)
            for s in (-b - rt, -b + rt):
                if 1e-14 < s < length - 1e-14:
                    breaks.append(s)
    for te in ang_edges[:-1]:
        ue = np.array([np.cos(te), np.sin(te)])
        den = ue[0] * u[1] - ue[1] * u[0]
        if abs(den) > 1e-14:
            s = (ue[1] * x0[0] - ue[0] * x0[1]) / den
            if 1e-14 < s < length - 1e-14:
                p = x0 + s * u
                if p @ ue > 0:
                    breaks.append(s)
    s_edges = np.unique(np.asarray(breaks))
    mids = 0.5 * (s_edges[:-1] + s_edges[1:])
    pts = x0[None, :] + mids[:, None] * u[None, :]
    r = np.sqrt(np.sum(pts * pts, axis=-1))
    ir = np.clip(np.searchsorted(r_edges, r, "right") - 1, 0, len(r_edges) - 2)
    ang = np.arctan2(pts[:, 1], pts[:, 0]) % (2 * np.pi)
    n_ang = len(ang_edges) - 1
    ia = np.clip((ang / (2 * np.pi) * n_ang).astype(int), 0, n_ang - 1)
    return s_edges, ir, ia
