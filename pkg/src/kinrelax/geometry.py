"""Exact ray geometry of strictly convex domains (disk, ball).

All travel-time computations reduce to the ray/sphere quadratic, so exit
times, boundary feet and chord times are exact to rounding.  Functions are
vectorized over trailing-batch arrays of positions/velocities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRAZING_TOL = 1e-12

OUTGOING = 1
INCOMING = -1
GRAZING = 0


class GeometryError(ValueError):
    pass


class OutsideDomainError(GeometryError):
    pass


class NoFootError(GeometryError):
    pass


class GrazingRayError(GeometryError):
    pass


@dataclass(frozen=True)
class Domain:
    """Disk (dim=2) or ball (dim=3) with center and radius."""

    dim: int = 2
    radius: float = 1.0
    center: tuple = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise GeometryError(f"dim must be 2 or 3, got {self.dim}")
        if not self.radius > 0:
            raise GeometryError("radius must be positive")
        c = self.center if self.center is not None else (0.0,) * self.dim
        object.__setattr__(self, "center", tuple(float(v) for v in c))
        if len(self.center) != self.dim:
            raise GeometryError("center dimension mismatch")

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius

    @property
    def volume(self) -> float:
        if self.dim == 2:
            return np.pi * self.radius**2
        return 4.0 / 3.0 * np.pi * self.radius**3

    @property
    def surface(self) -> float:
        if self.dim == 2:
            return 2.0 * np.pi * self.radius
        return 4.0 * np.pi * self.radius**2

    def normal(self, x):
        """Outward unit normal at boundary point(s) x."""
        xc = np.asarray(x, float) - self.center
        return xc / self.radius

    def contains(self, x, tol=None):
        xc = np.asarray(x, float) - self.center
        r = np.sqrt(np.sum(xc * xc, axis=-1))
        tol = GRAZING_TOL * self.diameter if tol is None else tol
        return r <= self.radius + tol

    def boundary_point(self, angle, polar=None):
        """Boundary point at given parametrization angle(s).

        dim=2: ``angle`` is the polar angle.  dim=3: pass ``angle`` =
        azimuth and ``polar`` = colatitude.
        """
        a = np.asarray(angle, float)
        if self.dim == 2:
            p = np.stack([np.cos(a), np.sin(a)], axis=-1)
        else:
            th = np.asarray(polar, float)
            p = np.stack(
                [np.sin(th) * np.cos(a), np.sin(th) * np.sin(a), np.cos(th)],
                axis=-1,
            )
        return self.center + self.radius * p


@dataclass
class PhasePoint:
    """Position/velocity pair with membership validation."""

    x: np.ndarray
    v: np.ndarray
    domain: Domain = field(default_factory=Domain)

    def __post_init__(self):
        self.x = np.asarray(self.x, float)
        self.v = np.asarray(self.v, float)
        if not np.all(self.domain.contains(self.x)):
            raise OutsideDomainError("position outside closure of the domain")


def classify_side(domain: Domain, x, v, tol: float = GRAZING_TOL):
    """Sign of v.n(x) at boundary points: +1 outgoing, -1 incoming, 0 grazing."""
    v = np.asarray(v, float)
    speed = np.sqrt(np.sum(v * v, axis=-1))
    n = domain.normal(x)
    vn = np.sum(v * n, axis=-1)
    out = np.where(vn > 0, OUTGOING, INCOMING)
    graze = np.abs(vn) <= tol * np.maximum(speed, 1e-300)
    return np.where(graze, GRAZING, out)


def _ray_times(domain: Domain, x, v):
    """Both roots of the ray/sphere quadratic: (t_backward, t_forward).

    For x in the closure, t_backward, t_forward >= 0 and x - t_b v,
    x + t_f v lie on the boundary.  Zero velocity yields +inf.
    """
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    xc = x - domain.center
    a = np.sum(v * v, axis=-1)
    b = np.sum(xc * v, axis=-1)
    c = np.sum(xc * xc, axis=-1) - domain.radius**2
    if np.any(c > (GRAZING_TOL * domain.diameter) ** 2 + 2 * GRAZING_TOL * domain.radius * domain.diameter):
        rad = np.sqrt(np.maximum(np.sum(xc * xc, axis=-1), 0.0))
        if np.any(rad > domain.radius * (1.0 + 1e-11)):
            raise OutsideDomainError("position outside closure of the domain")
    disc = np.maximum(b * b - a * c, 0.0)
    root = np.sqrt(disc)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_fwd = np.where(a > 0, (root - b) / np.where(a > 0, a, 1.0), np.inf)
        t_bwd = np.where(a > 0, (root + b) / np.where(a > 0, a, 1.0), np.inf)
    return np.maximum(t_bwd, 0.0), np.maximum(t_fwd, 0.0)


def exit_time(domain: Domain, x, v, direction: str = "forward"):
    """Travel time to the boundary from x along +v (forward) or -v (backward).

    Returns +inf where v = 0.  Scales exactly: exit_time(x, c v) = t / c.
    """
    t_bwd, t_fwd = _ray_times(domain, x, v)
    if direction == "forward":
        return t_fwd
    if direction == "backward":
        return t_bwd
    raise GeometryError(f"direction must be forward|backward, got {direction!r}")


def boundary_foot(domain: Domain, x, v):
    """Backward foot (x - t_b v, t_b): entry point of the chord through (x, v)."""
    v = np.asarray(v, float)
    if np.any(np.sum(v * v, axis=-1) == 0.0):
        raise NoFootError("zero velocity has no boundary foot")
    t_bwd, _ = _ray_times(domain, x, v)
    foot = np.asarray(x, float) - t_bwd[..., None] * v
    return foot, t_bwd


def forward_exit(domain: Domain, x, v):
    """Forward exit point (x + t_f v, t_f) of the chord through (x, v)."""
    v = np.asarray(v, float)
    if np.any(np.sum(v * v, axis=-1) == 0.0):
        raise NoFootError("zero velocity never exits")
    _, t_fwd = _ray_times(domain, x, v)
    return np.asarray(x, float) + t_fwd[..., None] * v, t_fwd


def chord_time(domain: Domain, x, v):
    """Full chord traversal time through boundary point x with velocity v.

    For outgoing (x, v) this is the backward chord time; for incoming the
    forward one.  Grazing rays are rejected.
    """
    side = classify_side(domain, x, v)
    if np.any(side == GRAZING):
        raise GrazingRayError("chord time undefined for grazing rays")
    t_bwd, t_fwd = _ray_times(domain, x, v)
    return np.where(side == OUTGOING, t_bwd, t_fwd)


def disk_chord_data(domain: Domain, alpha, psi, speed):
    """Chord bookkeeping on a disk, in boundary coordinates.

    A chord leaving the boundary point at polar angle ``alpha`` into the
    domain with local direction angle ``psi`` (measured from the inward
    normal, positive toward the positive tangent) and given ``speed``
    reaches the boundary again at angle ``alpha + pi - 2 psi``, arriving
    with the same local angle ``psi`` in the outgoing frame.  Returns
    (exit_angle, chord_time, direction_unit_vector).
    """
    if domain.dim != 2:
        raise GeometryError("disk_chord_data is 2-D only")
    alpha = np.asarray(alpha, float)
    psi = np.asarray(psi, float)
    speed = np.asarray(speed, float)
    exit_angle = alpha + np.pi - 2.0 * psi
    tau = 2.0 * domain.radius * np.cos(psi) / speed
    sigma_angle = alpha + np.pi - psi
    sigma = np.stack([np.cos(sigma_angle), np.sin(sigma_angle)], axis=-1)
    return exit_angle, tau, sigma
