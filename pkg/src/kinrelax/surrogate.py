"""Finite-grid surrogate of the transport semigroup on the disk.

Couples a phase grid with a boundary grid through exact chord tables:

* every incoming boundary cell owns one geometric chord, cut into exact
  segments by the position cells it crosses;
* every phase cell owns a forward flight (exit node, exit time) and a
  backward one.

The same tables drive both sides of every frequency/time comparison: the
Laplace/Fourier chain evaluates closed-form residence integrals
``int e^{-lambda s} ds`` over the segments, while the time-marching twin
counts the same segments against binned wall-departure histories, so
discretization error cancels in cross-checks and only quadrature error is
measured.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boundary import KernelSpec, ParameterError, apply_H
from .measures import BoundaryGrid
from .phasegrid import PhaseGrid, trace_ray


def _residence(s0, s1, lam, order=0):
    """int_{s0}^{s1} s^order e^{-lam s} ds, elementwise (order 0 or 1)."""
    lam = complex(lam)
    if lam == 0.0:
        return (s1 - s0) if order == 0 else 0.5 * (s1 * s1 - s0 * s0)
    e0 = np.exp(-lam * s0)
    e1 = np.exp(-lam * s1)
    if order == 0:
        return (e0 - e1) / lam
    inv = 1.0 / lam
    return (s0 * inv + inv * inv) * e0 - (s1 * inv + inv * inv) * e1


def aligned_phase_grid(grid: BoundaryGrid, n_r=16, n_ang=32, n_omega=32) -> PhaseGrid:
    """Phase grid whose speed cells are exactly the boundary quadrature
    panels, so node-to-cell speed binning is panel-exact."""
    return PhaseGrid(
        grid.domain,
        n_r=n_r,
        n_ang=n_ang,
        n_omega=n_omega,
        rho_edges=grid.measure.panel_edges,
    )


class SurrogateSpace:
    """Shared chord/segment tables between a phase grid and a boundary grid."""

    def __init__(self, phase: PhaseGrid, grid: BoundaryGrid, spec: KernelSpec):
        if phase.domain.radius != grid.domain.radius:
            raise ParameterError("phase and boundary grids live on different disks")
        self.phase = phase
        self.grid = grid
        self.spec = spec
        self._build_boundary_tables()
        self._build_exit_tables()
        self._int_rays = None

    # -- boundary chords ---------------------------------------------------
    def _build_boundary_tables(self):
        g, p = self.grid, self.phase
        R = g.domain.radius
        rows_ray, rows_u0, rows_u1, rows_pos = [], [], [], []
        self.ray_iw = np.empty((g.n_angle, g.n_dir), dtype=int)
        self.chord_len = 2.0 * R * np.cos(g.psi)  # distance, per direction
        for i in range(g.n_angle):
            x0 = g.points[i]
            for j in range(g.n_dir):
                u = g.incoming_direction(i, j)
                ang = (g.alphas[i] + np.pi - g.psi[j]) % (2 * np.pi)
                self.ray_iw[i, j] = min(int(ang / (2 * np.pi) * p.n_omega), p.n_omega - 1)
                L = self.chord_len[j]
                s_edges, ir, ia = trace_ray(
                    x0, u, L, p.r_edges, p.ang_edges, g.domain.center
                )
                rid = i * g.n_dir + j
                rows_ray.append(np.full(len(ir), rid))
                rows_u0.append(s_edges[:-1])
                rows_u1.append(s_edges[1:])
                rows_pos.append(ir * p.n_ang + ia)
        self.seg_ray = np.concatenate(rows_ray)
        self.seg_u0 = np.concatenate(rows_u0)
        self.seg_u1 = np.concatenate(rows_u1)
        self.seg_pos = np.concatenate(rows_pos)
        # flatten over (segment row, boundary speed node)
        rho = g.measure.nodes
        n_sp = len(rho)
        self.speed_cell = np.clip(
            np.searchsorted(p.rho_edges, rho, "right") - 1, 0, p.n_rho - 1
        )
        i_of_ray = self.seg_ray // g.n_dir
        j_of_ray = self.seg_ray % g.n_dir
        self.flat_s0 = (self.seg_u0[:, None] / rho[None, :]).ravel()
        self.flat_s1 = (self.seg_u1[:, None] / rho[None, :]).ravel()
        self.flat_node = np.repeat(i_of_ray, n_sp)
        self.flat_dir = np.repeat(j_of_ray, n_sp)
        self.flat_l = np.tile(np.arange(n_sp), len(self.seg_ray))
        iw = self.ray_iw[i_of_ray, j_of_ray]
        vcell = iw[:, None] * p.n_rho + self.speed_cell[None, :]
        nv = p.n_omega * p.n_rho
        self.flat_cell = (self.seg_pos[:, None] * nv + vcell).ravel()
        # nearest boundary speed node for each phase speed cell (for G)
        self.node_of_speed_cell = np.array(
            [int(np.argmin(np.abs(rho - rc))) for rc in p.rho_cent]
        )

    # -- phase-cell forward flights -----------------------------------------
    def _build_exit_tables(self):
        p, g = self.phase, self.grid
        cents = p.position_centroids()  # (n_r, n_ang, 2)
        x = cents[:, :, None, :] - np.asarray(g.domain.center)
        u = np.stack([np.cos(p.omega_cent), np.sin(p.omega_cent)], axis=-1)[
            None, None, :, :
        ]
        b = np.sum(x * u, axis=-1)
        c0 = np.sum(x * x, axis=-1) - g.domain.radius**2
        disc = np.sqrt(np.maximum(b * b - c0, 0.0))
        self.exit_dist = disc - b  # (n_r, n_ang, n_omega), unit-speed distance
        self.back_dist = disc + b
        exit_pt = x + self.exit_dist[..., None] * u
        exit_ang = np.arctan2(exit_pt[..., 1], exit_pt[..., 0]) % (2 * np.pi)
        self.exit_node = np.rint(exit_ang / g.h_angle).astype(int) % g.n_angle
        n = exit_pt / g.domain.radius
        t = np.stack([-n[..., 1], n[..., 0]], axis=-1)
        psi_loc = np.arctan2(
            np.sum(u * t, axis=-1), np.sum(u * n, axis=-1)
        )  # outgoing local angle at the exit point
        psi_edges = np.concatenate(
            [[-np.pi / 2], 0.5 * (g.psi[:-1] + g.psi[1:]), [np.pi / 2]]
        )
        self.exit_j = np.clip(
            np.searchsorted(psi_edges, psi_loc, "right") - 1, 0, g.n_dir - 1
        )
        # exit times per speed cell: distance / representative speed
        self.t_exit = (
            self.exit_dist[..., None] / self.phase.rho_cent[None, None, None, :]
        )
        self.exit_l = np.array(
            [int(np.argmin(np.abs(g.measure.nodes - rc))) for rc in p.rho_cent]
        )

    def _interior_rays(self):
        if self._int_rays is not None:
            return self._int_rays
        p = self.phase
        cents = p.position_centroids()
        rows_ray, rows_u0, rows_u1, rows_pos = [], [], [], []
        rid = 0
        for ir in range(p.n_r):
            for ia in range(p.n_ang):
                x0 = cents[ir, ia]
                for iw in range(p.n_omega):
                    u = np.array(
                        [np.cos(p.omega_cent[iw]), np.sin(p.omega_cent[iw])]
                    )
                    L = self.exit_dist[ir, ia, iw]
                    s_edges, jr, ja = trace_ray(
                        x0, u, L, p.r_edges, p.ang_edges, p.domain.center
                    )
                    rows_ray.append(np.full(len(jr), rid))
                    rows_u0.append(s_edges[:-1])
                    rows_u1.append(s_edges[1:])
                    rows_pos.append(jr * p.n_ang + ja)
                    rid += 1
        self._int_rays = (
            np.concatenate(rows_ray),
            np.concatenate(rows_u0),
            np.concatenate(rows_u1),
            np.concatenate(rows_pos),
        )
        return self._int_rays

    # -- flow operators on masses -------------------------------------------
    def collect_G(self, phase_masses, lam=0.0):
        """Forward-flight collection of phase masses onto the outgoing grid."""
        lam = complex(lam)
        p, g = self.phase, self.grid
        m = np.asarray(phase_masses)
        damp = np.exp(-lam * self.t_exit)
        if lam.imag == 0.0:
            damp = damp.real
        w = (m * damp).reshape(p.n_r * p.n_ang, p.n_omega, p.n_rho)
        out = np.zeros((g.n_angle, g.n_dir, len(g.measure.nodes)), dtype=w.dtype)
        node = self.exit_node.reshape(-1, p.n_omega)
        jbin = self.exit_j.reshape(-1, p.n_omega)
        for il in range(p.n_rho):
            ltgt = self.exit_l[il]
            flat = (node * g.n_dir + jbin).ravel()
            np.add.at(
                out[:, :, ltgt].reshape(-1), flat, w[:, :, il].ravel()
            )
        return out

    def flux_source(self, phase_masses, lam, time_weight=0):
        """Node-aggregated Laplace transform of the first wall arrivals.

        ``time_weight=1`` multiplies by (-i t) per cell: the frequency
        derivative of the source along the imaginary axis.
        """
        lam = complex(lam)
        m = np.asarray(phase_masses).ravel()
        t = self.t_exit.ravel()
        w = m * np.exp(-lam * t)
        if time_weight:
            w = w * (-1j * t) ** time_weight
        node = np.broadcast_to(
            self.exit_node[..., None], self.t_exit.shape
        ).ravel()
        return np.bincount(node, w.real, self.grid.n_angle) + 1j * np.bincount(
            node, w.imag, self.grid.n_angle
        )

    def lift_Xi(self, bdry_masses, lam=0.0, deriv=0):
        """In-flight phase masses generated by incoming boundary masses.

        ``deriv=1`` multiplies the residence integrand by (-i s): the
        frequency derivative of the lift along the imaginary axis.
        """
        lam = complex(lam)
        m = np.asarray(bdry_masses)
        coef = m[self.flat_node, self.flat_dir, self.flat_l]
        res = _residence(self.flat_s0, self.flat_s1, lam, order=deriv)
        w = coef * ((-1j) ** deriv) * res
        n = self.phase.n_cells
        out = np.bincount(self.flat_cell, np.real(w), n) + 1j * np.bincount(
            self.flat_cell, np.imag(w), n
        )
        return out.reshape(self.phase.shape)

    def lift_departures(self, node_flux, lam=0.0, deriv=0):
        """lift_Xi of the wall departures c[i, j, l] * node_flux[i]."""
        u = self.spec.c * np.asarray(node_flux)[:, None, None]
        return self.lift_Xi(u, lam, deriv)

    # -- cached per-frequency evaluation --------------------------------------
    def freq_workspace(self, eta: float):
        """Phase factors shared by every lift/source at one frequency."""
        lam = 1j * float(eta)
        ws = {"eta": float(eta), "lam": lam}
        ws["E0"] = np.exp(-lam * self.flat_s0)
        ws["E1"] = np.exp(-lam * self.flat_s1)
        if eta == 0.0:
            ws["res0"] = self.flat_s1 - self.flat_s0
            ws["res1"] = 0.5 * (self.flat_s1**2 - self.flat_s0**2)
        else:
            inv = 1.0 / lam
            ws["res0"] = (ws["E0"] - ws["E1"]) * inv
            ws["res1"] = (self.flat_s0 * inv + inv * inv) * ws["E0"] - (
                self.flat_s1 * inv + inv * inv
            ) * ws["E1"]
        ws["exp_texit"] = np.exp(-lam * self.t_exit.ravel())
        ws["dep_coef"] = self.spec.c[self.flat_node, self.flat_dir, self.flat_l]
        return ws

    def flux_source_ws(self, phase_masses, ws, time_weight=0):
        m = np.asarray(phase_masses).ravel()
        t = self.t_exit.ravel()
        w = m * ws["exp_texit"]
        if time_weight:
            w = w * (-1j * t) ** time_weight
        node = np.broadcast_to(self.exit_node[..., None], self.t_exit.shape).ravel()
        return np.bincount(node, w.real, self.grid.n_angle) + 1j * np.bincount(
            node, w.imag, self.grid.n_angle
        )

    def lift_pair_ws(self, flux, flux_deriv, ws):
        """(lift of flux, frequency derivative of the lift) in one pass.

        d/d eta of the lift applied to a flux family equals the lift of the
        flux derivative plus the (-i s)-weighted lift of the flux itself.
        """
        cf = ws["dep_coef"] * flux[self.flat_node]
        w = cf * ws["res0"]
        n = self.phase.n_cells
        psi = np.bincount(self.flat_cell, w.real, n) + 1j * np.bincount(
            self.flat_cell, w.imag, n
        )
        if flux_deriv is None:
            return psi.reshape(self.phase.shape), None
        wd = cf * (-1j) * ws["res1"] + ws["dep_coef"] * flux_deriv[self.flat_node] * ws["res0"]
        dpsi = np.bincount(self.flat_cell, wd.real, n) + 1j * np.bincount(
            self.flat_cell, wd.imag, n
        )
        return psi.reshape(self.phase.shape), dpsi.reshape(self.phase.shape)

    def spread_R(self, phase_masses, lam=0.0):
        """Free-resolvent action: forward spreading of phase masses along
        their own rays with exponential residence weights."""
        lam = complex(lam)
        seg_ray, u0, u1, pos = self._interior_rays()
        p = self.phase
        m = np.asarray(phase_masses).reshape(p.n_r * p.n_ang * p.n_omega, p.n_rho)
        out = np.zeros(p.n_cells, dtype=complex)
        nv = p.n_omega * p.n_rho
        iw_ray = seg_ray % p.n_omega
        for il in range(p.n_rho):
            rho = p.rho_cent[il]
            res = _residence(u0 / rho, u1 / rho, lam)
            w = m[seg_ray, il] * res
            tgt = pos * nv + iw_ray * p.n_rho + il
            out += np.bincount(tgt, np.real(w), p.n_cells) + 1j * np.bincount(
                tgt, np.imag(w), p.n_cells
            )
        if lam.imag == 0.0:
            out = out.real
        return out.reshape(p.shape)

    def backward_times(self):
        """Backward exit time per phase cell (for time-multiplied sources)."""
        return self.back_dist[..., None] / self.phase.rho_cent[None, None, None, :]

    def lift_symmetric(self, n_mu: int = 4096):
        """Rotation-averaged undamped lift of node-independent departures.

        Valid for rotation-invariant walls.  The entry-angle average is
        exact (including the fractional offset between position-angle and
        direction bins) and the local direction integral runs on its own
        fine midpoint grid in sin(psi): the flux weight is absorbed by the
        substitution and the departure law separates from the speed factor,
        so the only surviving errors are the fine-direction quadrature and
        the per-segment two-point rule.  Requires matching angular
        resolutions of position and direction cells.
        """
        p, g = self.phase, self.grid
        if p.n_ang != p.n_omega:
            raise ParameterError("symmetric lift needs n_ang == n_omega")
        h = 2 * np.pi / p.n_ang
        R = g.domain.radius
        x0 = np.array([R, 0.0]) + np.asarray(g.domain.center)
        # separable speed factor: residence carries 1/rho, binned by panel
        rho = g.measure.nodes
        flux_speed = self.spec.prof[0] * rho**g.measure.dim * g.measure.w_plain
        flux_speed = flux_speed / np.sum(flux_speed)
        s_fac = np.bincount(self.speed_cell, flux_speed / rho, p.n_rho)
        dep_geo = np.zeros((p.n_r, p.n_ang))
        mu = (np.arange(n_mu) + 0.5) / n_mu * 2.0 - 1.0  # sin(psi), midpoint
        w_mu = 1.0 / n_mu  # of int cos(psi) dpsi / 2 (flux-normalized)
        gx = np.array([0.5 - 0.5 / np.sqrt(3), 0.5 + 0.5 / np.sqrt(3)])
        for m in mu:
            psi = np.arcsin(m)
            omega_rel = np.pi - psi
            u = np.array([np.cos(omega_rel), np.sin(omega_rel)])
            L = 2.0 * R * np.sqrt(1.0 - m * m)
            # augment the angle edges with the direction-offset copies so the
            # fractional bin offset stays within one unit on every segment
            off = omega_rel % h
            aug = np.unique(
                np.concatenate([p.ang_edges[:-1], (p.ang_edges[:-1] + off) % (2 * np.pi), [2 * np.pi]])
            )
            s_edges, ir, _ = trace_ray(x0, u, L, p.r_edges, aug, g.domain.center)
            u0, u1 = s_edges[:-1], s_edges[1:]
            umid = u0[:, None] + (u1 - u0)[:, None] * gx[None, :]
            pts = (x0 - np.asarray(g.domain.center))[None, None, :] + umid[..., None] * u
            chi = np.arctan2(pts[..., 1], pts[..., 0])
            delta = (chi - omega_rel) / h
            base = np.floor(delta).astype(int)
            frac = delta - base
            w = w_mu * 0.5 * (u1 - u0)[:, None] * np.ones((1, 2))
            rows = np.repeat(ir, 2)
            np.add.at(dep_geo, (rows, base.ravel() % p.n_ang), (w * (1 - frac)).ravel())
            np.add.at(dep_geo, (rows, (base.ravel() + 1) % p.n_ang), (w * frac).ravel())
        dep = dep_geo[:, :, None] * s_fac[None, None, :]
        out = np.zeros(p.shape)
        for a in range(p.n_ang):
            w_idx = (a - np.arange(p.n_ang)) % p.n_omega
            out[:, a, w_idx, :] = dep[:, np.arange(p.n_ang), :] / p.n_ang
        return out

    # -- frequency-side chain ------------------------------------------------
    def flux_matrix(self, lam, deriv=0):
        """Boundary-node transfer matrix of wall + chord, or its frequency
        derivative (deriv=1: factor (-i tau) per transition)."""
        lam = complex(lam)
        g = self.grid
        damp = np.exp(-lam * g.tau)
        if deriv:
            damp = damp * (-1j * g.tau) ** deriv
        cd = np.sum(self.spec.c * damp[None, :, :], axis=2)
        K = np.zeros((g.n_angle, g.n_angle), dtype=complex)
        for j in range(g.n_dir):
            rows = (np.arange(g.n_angle) + g.shift_cells[j]) % g.n_angle
            K[rows, np.arange(g.n_angle)] += cd[:, j]
        return K

    # -- time-marching twin ---------------------------------------------------
    def march(self, phase_masses, t_max, dt, n_classes, tol=1e-12, max_gen=400):
        """Wall-departure histories per bounce class on a uniform time grid.

        Returns (departures[class 1..n_classes], departures_total), each an
        (n_nodes, n_bins) array of masses leaving the wall per time bin.
        Bounce classes beyond ``n_classes`` are lumped into the total only.
        """
        g = self.grid
        n_bins = int(np.ceil(t_max / dt)) + 2
        arrivals = np.zeros((g.n_angle, n_bins))
        m = np.asarray(phase_masses).ravel()
        t = self.t_exit.ravel()
        node = np.broadcast_to(self.exit_node[..., None], self.t_exit.shape).ravel()
        pos = t / dt
        i0 = np.floor(pos).astype(int)
        frac = pos - i0
        ok = i0 < n_bins - 1
        flat = node * n_bins + i0
        arrivals.ravel()[:] += np.bincount(
            flat[ok], (m * (1 - frac))[ok], g.n_angle * n_bins
        )
        arrivals.ravel()[:] += np.bincount(
            flat[ok] + 1, (m * frac)[ok], g.n_angle * n_bins
        )
        tau_bins = g.tau / dt
        classes = []
        total = np.zeros_like(arrivals)
        cur = arrivals
        m0 = max(np.sum(np.abs(m)), 1e-300)
        for k in range(1, max_gen + 1):
            if k <= n_classes:
                classes.append(cur.copy())
            total += cur
            if np.sum(np.abs(cur)) < tol * m0:
                while len(classes) < n_classes:
                    classes.append(np.zeros_like(arrivals))
                break
            cur = self._propagate(cur, tau_bins, dt, n_bins)
        else:
            raise RuntimeError("wall-departure marching did not drain")
        return classes, total

    def _propagate(self, D, tau_bins, dt, n_bins):
        g = self.grid
        out = np.zeros_like(D)
        for j in range(g.n_dir):
            s = g.shift_cells[j]
            for l in range(len(g.measure.nodes)):
                w = self.spec.c[:, j, l]
                tmp = np.roll(D * w[:, None], s, axis=0)
                ofs = tau_bins[j, l]
                i0 = int(np.floor(ofs))
                frac = ofs - i0
                if i0 >= n_bins:
                    continue
                hi = n_bins - i0
                out[:, i0:] += tmp[:, :hi] * (1 - frac)
                if i0 + 1 < n_bins:
                    out[:, i0 + 1 :] += tmp[:, : hi - 1] * frac
        return out

    def inflight_from_departures(self, D, t, dt):
        """Phase masses in flight at time t given wall-departure bins D.

        Departures are treated as uniform within each bin; the window sum
        is two interpolated lookups of the cumulative history per segment.
        """
        g, p = self.grid, self.phase
        n_bins = D.shape[1]
        CD = np.concatenate(
            [np.zeros((g.n_angle, 1)), np.cumsum(D, axis=1)], axis=1
        )

        def cd_at(nodes, s):
            # cumulative departures of node up to continuous time s
            pos = np.clip(s / dt, 0.0, n_bins)
            i0 = np.floor(pos).astype(int)
            frac = pos - i0
            i0 = np.clip(i0, 0, n_bins - 1)
            base = CD[nodes, i0]
            nxt = CD[nodes, np.minimum(i0 + 1, n_bins)]
            return base + frac * (nxt - base)

        coef = self.spec.c[self.flat_node, self.flat_dir, self.flat_l]
        hi = cd_at(self.flat_node, t - self.flat_s0)
        lo = cd_at(self.flat_node, t - self.flat_s1)
        w = coef * (hi - lo)
        out = np.bincount(self.flat_cell, w, p.n_cells)
        return out.reshape(p.shape)

    def inflight_initial(self, phase_masses, t):
        """Initial cells still in free flight at time t, re-binned in space."""
        p = self.phase
        m = np.asarray(phase_masses)
        out = p.zeros()
        cents = p.position_centroids()
        u = np.stack([np.cos(p.omega_cent), np.sin(p.omega_cent)], axis=-1)
        for il in range(p.n_rho):
            rho = p.rho_cent[il]
            alive = self.exit_dist / rho > t  # (n_r, n_ang, n_omega)
            if not np.any(alive):
                continue
            x = cents[:, :, None, :] + t * rho * u[None, None, :, :]
            ir, ia = p.bin_position(x.reshape(-1, 2))
            iw = np.broadcast_to(
                np.arange(p.n_omega)[None, None, :], alive.shape
            ).ravel()
            w = (m[:, :, :, il] * alive).ravel()
            flat = (ir * p.n_ang + ia) * p.n_omega + iw
            acc = np.bincount(flat, w, p.n_r * p.n_ang * p.n_omega)
            out[:, :, :, il] += acc.reshape(p.n_r, p.n_ang, p.n_omega)
        return out


def apply_G(space: SurrogateSpace, phase_masses, lam=0.0):
    return space.collect_G(phase_masses, lam)


def apply_Xi(space: SurrogateSpace, bdry_masses, lam=0.0, weight_guard=1e4):
    """Lift of incoming boundary masses to in-flight phase masses.

    At lam = 0 the lift is only meaningful for inputs with a finite
    inverse-speed-weighted norm; inputs whose discrete weighted/plain norm
    ratio exceeds ``weight_guard`` are rejected.
    """
    lam = complex(lam)
    if lam == 0.0:
        g = space.grid
        m = np.abs(np.asarray(bdry_masses))
        plain = np.sum(m)
        weighted = np.sum(m * g.varpi[1][None, None, :])
        if plain > 0 and weighted / plain > weight_guard:
            raise ParameterError(
                "lift at lambda = 0 requires inverse-speed integrable input"
            )
    return space.lift_Xi(bdry_masses, lam)


def apply_R(space: SurrogateSpace, phase_masses, lam=0.0):
    return space.spread_R(phase_masses, lam)
