"""Event-driven Monte Carlo transport on the disk with diffuse wall
re-emission, plus deterministic bounce-mass quadratures and rate fitting.

Particles jump chord to chord (no time stepping); wall re-emission samples
the flux law exactly: normal component Rayleigh, tangential Gaussian, both
at the local wall temperature.  Trajectories stream: nothing is stored per
particle, record times interpolate the current free flight exactly.

Randomness is counter-based: every particle owns a generator seeded by a
64-bit mix of (seed, particle index), so results are bit-identical for a
fixed seed regardless of thread count (threads split over whole batches
and batch accumulators merge in fixed order).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange
from scipy import integrate
from scipy.special import erf

from .geometry import Domain


# ---------------------------------------------------------------------------
# counter-based RNG building blocks (splitmix64-seeded PCG32)


@njit(inline="always", cache=True)
def _splitmix64(z):
    z = (z + np.uint64(0x9E3779B97F4A7C15)) & np.uint64(0xFFFFFFFFFFFFFFFF)
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & np.uint64(
        0xFFFFFFFFFFFFFFFF
    )
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & np.uint64(
        0xFFFFFFFFFFFFFFFF
    )
    return z ^ (z >> np.uint64(31))


@njit(inline="always", cache=True)
def _pcg32(state, inc):
    old = state
    state = (old * np.uint64(6364136223846793005) + inc) & np.uint64(
        0xFFFFFFFFFFFFFFFF
    )
    xorshifted = np.uint32(((old >> np.uint64(18)) ^ old) >> np.uint64(27))
    rot = np.uint32(old >> np.uint64(59))
    out = np.uint32(
        (xorshifted >> rot) | (xorshifted << ((np.uint32(32) - rot) & np.uint32(31)))
    )
    return state, out


@njit(inline="always", cache=True)
def _uniform(state, inc):
    state, x = _pcg32(state, inc)
    return state, (np.float64(x) + 0.5) * (1.0 / 4294967296.0)


@njit(inline="always", cache=True)
def _particle_stream(seed, pid):
    state = _splitmix64(np.uint64(seed) ^ _splitmix64(np.uint64(pid)))
    inc = (_splitmix64(np.uint64(pid) + np.uint64(0x1234567)) | np.uint64(1))
    return state, inc


# ---------------------------------------------------------------------------
# sampling helpers

INIT_EQUILIBRIUM = 0
INIT_SPEED_WINDOW = 1
INIT_RING = 2


@njit(inline="always", cache=True)
def _sample_initial(state, inc, kind, R, p0, p1):
    # position uniform in the disk (ring kind: radius in [p0*R, p1*R] annulus)
    state, u1 = _uniform(state, inc)
    state, u2 = _uniform(state, inc)
    if kind == INIT_RING:
        r = R * np.sqrt(p0 * p0 + (p1 * p1 - p0 * p0) * u1)
    else:
        r = R * np.sqrt(u1)
    ang = 2.0 * np.pi * u2
    x = r * np.cos(ang)
    y = r * np.sin(ang)
    state, u3 = _uniform(state, inc)
    phi = 2.0 * np.pi * u3
    state, u4 = _uniform(state, inc)
    if kind == INIT_SPEED_WINDOW:
        # speed density rho exp(-rho^2/2) restricted to [p0, p1]
        ea = np.exp(-p0 * p0 / 2.0)
        eb = np.exp(-p1 * p1 / 2.0)
        rho = np.sqrt(-2.0 * np.log(ea - u4 * (ea - eb)))
    else:
        rho = np.sqrt(-2.0 * np.log(u4))
    return state, x, y, rho * np.cos(phi), rho * np.sin(phi)


@njit(inline="always", cache=True)
def _wall_resample(state, inc, nx, ny, theta):
    # flux law at a diffuse wall: normal speed Rayleigh, tangential Gaussian
    state, u1 = _uniform(state, inc)
    vn = np.sqrt(-2.0 * theta * np.log(u1))
    state, u2 = _uniform(state, inc)
    state, u3 = _uniform(state, inc)
    vt = np.sqrt(theta) * np.sqrt(-2.0 * np.log(u2)) * np.cos(2.0 * np.pi * u3)
    # inward normal is (-nx, -ny); tangent (-ny, nx)
    vx = -vn * nx - vt * ny
    vy = -vn * ny + vt * nx
    return state, vx, vy


@njit(inline="always", cache=True)
def _exit_time(x, y, vx, vy, R):
    a = vx * vx + vy * vy
    b = x * vx + y * vy
    c = x * x + y * y - R * R
    disc = b * b - a * c
    if disc < 0.0:
        disc = 0.0
    return (np.sqrt(disc) - b) / a


@njit(cache=True, parallel=True)
def _run_streaming(
    seed,
    n_batches,
    per_batch,
    R,
    theta,
    init_kind,
    p0,
    p1,
    record_times,
    r2_edges,
    rho_edges,
    n_phi,
    k_max,
    hist,
    class_mass,
    class_hist,
    class_hist_upto,
    capped,
    event_cap,
):
    n_rec = record_times.shape[0]
    n_r = r2_edges.shape[0] - 1
    n_rho = rho_edges.shape[0] - 1
    for b in prange(n_batches):
        for p in range(per_batch):
            pid = b * per_batch + p
            state, inc = _particle_stream(seed, pid)
            state, x, y, vx, vy = _sample_initial(state, inc, init_kind, R, p0, p1)
            t_cur = 0.0
            bounces = 0
            events = 0
            t_hit = _exit_time(x, y, vx, vy, R)
            dead = False
            for rec in range(n_rec):
                t_rec = record_times[rec]
                while t_cur + t_hit < t_rec:
                    t_cur += t_hit
                    x += t_hit * vx
                    y += t_hit * vy
                    nrm = np.sqrt(x * x + y * y)
                    x = x / nrm * R
                    y = y / nrm * R
                    state, vx, vy = _wall_resample(state, inc, x / R, y / R, theta)
                    bounces += 1
                    events += 1
                    if events >= event_cap:
                        capped[b] += 1
                        dead = True
                        break
                    t_hit = _exit_time(x, y, vx, vy, R)
                if dead:
                    break
                dt = t_rec - t_cur
                px = x + dt * vx
                py = y + dt * vy
                r2 = px * px + py * py
                ir = 0
                for k in range(n_r):
                    if r2 >= r2_edges[k] and r2 <= r2_edges[k + 1]:
                        ir = k
                        break
                rho = np.sqrt(vx * vx + vy * vy)
                il = n_rho - 1
                for k in range(n_rho):
                    if rho < rho_edges[k + 1]:
                        il = k
                        break
                phi = np.arctan2(px * vy - py * vx, px * vx + py * vy)
                ip = int((phi / (2.0 * np.pi) % 1.0) * n_phi)
                if ip >= n_phi:
                    ip = n_phi - 1
                flat = (ir * n_phi + ip) * n_rho + il
                hist[b, rec, flat] += 1.0
                kk = bounces if bounces < k_max else k_max
                class_mass[b, rec, kk] += 1.0
                if bounces <= class_hist_upto:
                    class_hist[b, rec, bounces, flat] += 1.0


@dataclass
class ParticleEnsemble:
    """Materialized weighted particle set (small runs and module checks)."""

    x: np.ndarray
    v: np.ndarray
    bounce_count: np.ndarray
    weight: np.ndarray
    time: float
    domain: Domain
    seed: int = 0

    @property
    def total_weight(self) -> float:
        return float(np.sum(self.weight))

    def speeds(self):
        return np.sqrt(np.sum(self.v * self.v, axis=-1))


def sample_ensemble(domain: Domain, n, seed, init="equilibrium", window=(0.5, 1.5), theta=1.0):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE15]))
    d = domain.dim
    r = domain.radius * rng.random(n) ** (1.0 / d)
    dirs = rng.normal(size=(n, d))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    x = r[:, None] * dirs + np.asarray(domain.center)
    vdirs = rng.normal(size=(n, d))
    vdirs /= np.linalg.norm(vdirs, axis=-1, keepdims=True)
    if init == "equilibrium":
        if d == 2:
            rho = np.sqrt(-2 * theta * np.log(rng.random(n)))
        else:
            rho = np.sqrt(theta) * np.sqrt(
                np.sum(rng.standard_normal((n, 3)) ** 2, axis=-1)
            )
    elif init == "speed-window":
        a, b = window
        if d != 2:
            raise ValueError("speed-window sampling implemented for the disk")
        ea, eb = np.exp(-a * a / 2), np.exp(-b * b / 2)
        rho = np.sqrt(-2 * np.log(ea - rng.random(n) * (ea - eb)))
    else:
        raise ValueError(f"unknown init {init!r}")
    v = rho[:, None] * vdirs
    return ParticleEnsemble(
        x=x,
        v=v,
        bounce_count=np.zeros(n, dtype=np.int64),
        weight=np.full(n, 1.0 / n),
        time=0.0,
        domain=domain,
        seed=seed,
    )


def evolve_free(ens: ParticleEnsemble, t: float) -> ParticleEnsemble:
    """Absorbing free flight: mass reaching the wall is dropped."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    from .geometry import exit_time

    t_hit = exit_time(ens.domain, ens.x, ens.v, "forward")
    alive = t < t_hit
    return ParticleEnsemble(
        x=ens.x[alive] + t * ens.v[alive],
        v=ens.v[alive],
        bounce_count=ens.bounce_count[alive],
        weight=ens.weight[alive],
        time=ens.time + t,
        domain=ens.domain,
        seed=ens.seed,
    )


def evolve_walls(ens: ParticleEnsemble, t: float, theta=1.0) -> ParticleEnsemble:
    """Diffuse-wall evolution of a materialized ensemble (exact events)."""
    R = ens.domain.radius
    n = len(ens.weight)
    x = ens.x.copy()
    v = ens.v.copy()
    k = ens.bounce_count.copy()
    rng_master = np.random.SeedSequence([ens.seed, int(ens.time * 1e6) & 0xFFFF, 0xAB])
    rng = np.random.default_rng(rng_master)
    t_left = np.full(n, float(t))
    while True:
        from .geometry import exit_time

        t_hit = exit_time(ens.domain, x, v, "forward")
        hit = t_hit < t_left
        if not np.any(hit):
            break
        idx = np.where(hit)[0]
        x[idx] += t_hit[idx, None] * v[idx]
        cen = np.asarray(ens.domain.center)
        nrm = np.linalg.norm(x[idx] - cen, axis=-1, keepdims=True)
        x[idx] = cen + (x[idx] - cen) * (R / nrm)
        t_left[idx] -= t_hit[idx]
        nx = (x[idx] - cen) / R
        vn = np.sqrt(-2 * theta * np.log(rng.random(len(idx))))
        if ens.domain.dim == 2:
            vt = np.sqrt(theta) * rng.standard_normal(len(idx))
            v[idx, 0] = -vn * nx[:, 0] - vt * nx[:, 1]
            v[idx, 1] = -vn * nx[:, 1] + vt * nx[:, 0]
        else:
            t1 = np.cross(nx, np.tile([0.0, 0.0, 1.0], (len(idx), 1)))
            bad = np.linalg.norm(t1, axis=-1) < 1e-8
            t1[bad] = np.cross(nx[bad], np.tile([0.0, 1.0, 0.0], (int(bad.sum()), 1)))
            t1 /= np.linalg.norm(t1, axis=-1, keepdims=True)
            t2 = np.cross(nx, t1)
            g = np.sqrt(theta) * rng.standard_normal((len(idx), 2))
            v[idx] = -vn[:, None] * nx + g[:, :1] * t1 + g[:, 1:] * t2
        k[idx] += 1
    x = x + t_left[:, None] * v
    return ParticleEnsemble(
        x=x, v=v, bounce_count=k, weight=ens.weight.copy(),
        time=ens.time + t, domain=ens.domain, seed=ens.seed,
    )


def bounce_class_mass(ens: ParticleEnsemble, k_max: int):
    """Masses of bounce classes 0..k_max plus the lumped remainder."""
    masses = np.zeros(k_max + 2)
    for k, w in zip(ens.bounce_count, ens.weight):
        masses[min(int(k), k_max + 1)] += w
    return masses[:-1], masses[-1]


# ---------------------------------------------------------------------------
# histogram layout and equilibrium reference


@dataclass
class CompareBins:
    """Shared coarse phase bins: radius x relative angle x speed.

    Edges are chosen as coarsenings of the phase-grid layout (uniform
    radius rings, dyadic speed panels) so grid masses rebin exactly.
    """

    domain: Domain
    n_r: int = 4
    n_phi: int = 8
    rho_edges: np.ndarray = field(
        default_factory=lambda: np.array(
            [0.0, 1 / 128, 1 / 64, 1 / 32, 1 / 16, 1 / 8, 1 / 4, 1 / 2, 1.0, 2.0, 4.0, 8.0]
        )
    )

    def __post_init__(self):
        R = self.domain.radius
        self.r_edges = np.linspace(0.0, R, self.n_r + 1)
        self.r2_edges = self.r_edges**2
        self.n_bins = self.n_r * self.n_phi * (len(self.rho_edges) - 1)

    def equilibrium_masses(self, theta=1.0):
        r_part = np.diff(self.r2_edges) / self.domain.radius**2
        a = self.rho_edges[:-1] / np.sqrt(theta)
        b = self.rho_edges[1:] / np.sqrt(theta)
        rho_part = np.exp(-(a**2) / 2) - np.exp(-(b**2) / 2)
        out = (
            r_part[:, None, None]
            * np.full(self.n_phi, 1.0 / self.n_phi)[None, :, None]
            * rho_part[None, None, :]
        )
        return out.reshape(-1)

    def bin_phase_masses(self, phase_grid, masses):
        """Exact rebinning of phase-grid cell masses into the compare bins.

        Requires the phase grid's radial/speed edges to refine this layout.
        """
        p = phase_grid
        ir = np.clip(np.searchsorted(self.r_edges, p.r_cent, "right") - 1, 0, self.n_r - 1)
        il = np.clip(
            np.searchsorted(self.rho_edges, p.rho_cent, "right") - 1,
            0,
            len(self.rho_edges) - 2,
        )
        out = np.zeros(self.n_bins)
        m = np.asarray(masses)
        nphi = self.n_phi
        for ia in range(p.n_ang):
            for iw in range(p.n_omega):
                rel = (p.omega_cent[iw] - p.ang_cent[ia]) % (2 * np.pi)
                ip = min(int(rel / (2 * np.pi) * nphi), nphi - 1)
                flat = (ir[:, None] * nphi + ip) * (len(self.rho_edges) - 1) + il[None, :]
                np.add.at(out, flat.ravel(), m[:, ia, iw, :].ravel())
        return out


# ---------------------------------------------------------------------------
# decay curve


@dataclass
class DecayCurve:
    times: np.ndarray
    values: np.ndarray  # debiased weighted L1 distance to the reference
    stderr: np.ndarray
    raw_values: np.ndarray
    noise_floor: np.ndarray
    class_masses: np.ndarray  # (n_rec, k_max + 1); last entry lumps the rest
    capped_events: int
    seed: int
    n_particles: int


def _distance_with_noise(hist_batches, reference):
    """Noise-cancelling L1 distance of binned proportions to the reference.

    Split-half statistic: |pooled - reference| minus half the magnitude of
    the between-half difference, summed over bins.  Under pure sampling
    noise the two terms have identical expectations bin by bin, so the
    statistic is centered at zero with no churn floor; with signal well
    above noise it estimates the plain L1 distance.  The spread comes from
    leave-one-batch-out resampling and the raw distance plus its expected
    null level are reported alongside.
    """

    def stat(batches):
        B2 = batches.shape[0]
        half_a = batches[: B2 // 2].sum(axis=0)
        half_b = batches[B2 // 2 :].sum(axis=0)
        pa = half_a / max(half_a.sum(), 1.0)
        pb = half_b / max(half_b.sum(), 1.0)
        mid = 0.5 * (pa + pb)
        return float(np.sum(np.abs(mid - reference) - 0.5 * np.abs(pa - pb)))

    B = hist_batches.shape[0]
    value = stat(hist_batches)
    p_hat = hist_batches.sum(axis=0) / max(hist_batches.sum(), 1.0)
    raw = float(np.sum(np.abs(p_hat - reference)))
    p_b = hist_batches / np.maximum(hist_batches.sum(axis=1, keepdims=True), 1.0)
    var_b = np.var(p_b, axis=0, ddof=1) / B
    floor = float(np.sqrt(2 / np.pi) * np.sum(np.sqrt(var_b)))
    jack = np.empty(B)
    for b in range(B):
        keep = np.delete(np.arange(B), b)
        jack[b] = stat(hist_batches[keep])
    se = float(np.sqrt((B - 1) / B * np.sum((jack - jack.mean()) ** 2)))
    return value, se, raw, floor


def simulate(
    domain: Domain,
    n_particles: int,
    seed: int,
    record_times,
    init="speed-window",
    window=(0.5, 1.5),
    theta: float = 1.0,
    bins: CompareBins = None,
    n_batches: int = 16,
    k_max: int = 8,
    class_hist_upto: int = -1,
    event_cap: int = 1_000_000,
):
    """Streaming Monte Carlo run; returns the decay curve against the
    stationary density plus bounce-class bookkeeping.

    ``class_hist_upto >= 0`` additionally histograms each bounce class up
    to that order (for class-resolved cross checks).
    """
    if seed is None:
        raise ValueError("a seed is mandatory for Monte Carlo runs")
    if bins is None:
        bins = CompareBins(domain)
    record_times = np.asarray(sorted(record_times), float)
    per_batch = int(np.ceil(n_particles / n_batches))
    n_eff = per_batch * n_batches
    kinds = {"equilibrium": INIT_EQUILIBRIUM, "speed-window": INIT_SPEED_WINDOW, "ring": INIT_RING}
    kind = kinds[init]
    p0, p1 = (window if init in ("speed-window", "ring") else (0.0, 0.0))
    hist = np.zeros((n_batches, len(record_times), bins.n_bins))
    class_mass = np.zeros((n_batches, len(record_times), k_max + 1))
    ch_upto = max(class_hist_upto, 0)
    class_hist = np.zeros(
        (n_batches, len(record_times), ch_upto + 1, bins.n_bins if class_hist_upto >= 0 else 1)
    )
    capped = np.zeros(n_batches, dtype=np.int64)
    _run_streaming(
        np.uint64(seed),
        n_batches,
        per_batch,
        float(domain.radius),
        float(theta),
        kind,
        float(p0),
        float(p1),
        record_times,
        bins.r2_edges,
        bins.rho_edges,
        bins.n_phi,
        k_max,
        hist,
        class_mass,
        class_hist,
        class_hist_upto,
        capped,
        event_cap,
    )
    reference = bins.equilibrium_masses(theta)
    values = np.empty(len(record_times))
    ses = np.empty(len(record_times))
    raws = np.empty(len(record_times))
    floors = np.empty(len(record_times))
    for r in range(len(record_times)):
        values[r], ses[r], raws[r], floors[r] = _distance_with_noise(hist[:, r], reference)
    curve = DecayCurve(
        times=record_times,
        values=values,
        stderr=ses,
        raw_values=raws,
        noise_floor=floors,
        class_masses=class_mass.sum(axis=0) / n_eff,
        capped_events=int(capped.sum()),
        seed=seed,
        n_particles=n_eff,
    )
    if class_hist_upto >= 0:
        return curve, class_hist.sum(axis=0) / n_eff
    return curve


# ---------------------------------------------------------------------------
# deterministic bounce-mass quadratures (disk, constant temperature)


def _lens(u):
    u = np.minimum(np.asarray(u, float), 2.0)
    return 2 * np.arccos(u / 2) - (u / 2) * np.sqrt(np.maximum(4 - u * u, 0.0))


def free_survival(t, speed_density, rho_max=8.0, radius=1.0):
    """Surviving mass of absorbing free flight from uniform positions."""

    def igrand(rho):
        return speed_density(rho) * _lens(np.asarray(t) * rho / radius) / np.pi

    val, _ = integrate.quad(igrand, 0.0, rho_max, limit=200)
    return val * (1.0 if radius == 1.0 else 1.0)


def window_speed_density(a, b):
    """Normalized window restriction of the planar equilibrium speed law."""
    norm = np.exp(-a * a / 2) - np.exp(-b * b / 2)

    def density(rho):
        rho = np.asarray(rho, float)
        return np.where((rho >= a) & (rho <= b), rho * np.exp(-(rho**2) / 2) / norm, 0.0)

    return density


def laplace_first_arrival(lam, speed_density, rho_max=8.0, radius=1.0):
    """Exact Laplace weight of the first wall arrivals from uniform
    positions and directions: the chord-exit distance has the half-circle
    density, so the transform is a two-level quadrature."""

    def inner(rho):
        val, _ = integrate.quad(
            lambda s: np.exp(-lam * s / rho)
            * np.sqrt(max(4 - (s / radius) ** 2, 0.0))
            / (np.pi * radius),
            0.0,
            2.0 * radius,
            limit=200,
        )
        return val

    total, _ = integrate.quad(
        lambda rho: speed_density(rho) * inner(rho), 0.0, rho_max, limit=200
    )
    return total


def first_arrival_rate(s, speed_density, rho_max=8.0, radius=1.0):
    """Wall-arrival mass rate of class zero at time s (uniform positions)."""

    def igrand(rho):
        u = s * rho / radius
        if u >= 2.0:
            return 0.0
        return speed_density(rho) * rho / radius * np.sqrt(4 - u * u) / np.pi

    val, _ = integrate.quad(igrand, 0.0, rho_max, limit=200)
    return val


def wall_chord_tail(u, theta=1.0, radius=1.0):
    """Probability that a freshly re-emitted chord lasts longer than u."""
    if u <= 0:
        return 1.0
    qnorm = np.sqrt(np.pi / 2) * theta**1.5

    def cdf(x):
        x = x / np.sqrt(theta)
        return (
            np.sqrt(np.pi / 2) * erf(x / np.sqrt(2)) - x * np.exp(-x * x / 2)
        ) / np.sqrt(np.pi / 2)

    def igrand(psi):
        return np.cos(psi) / 2 * cdf(2 * radius * np.cos(psi) / u)

    val, _ = integrate.quad(igrand, -np.pi / 2, np.pi / 2, limit=200)
    return val


def arrival_rate_chain(t_grid, k, speed_density, theta=1.0, radius=1.0):
    """Wall-arrival mass rates of bounce class k on a time grid.

    Class 0 arrivals come from the free flight of the uniform isotropic
    datum; each further class convolves with the wall-law chord-time
    density (position-independent on a constant-temperature disk).
    """
    s = np.asarray(t_grid, float)
    rate = np.array([first_arrival_rate(si, speed_density, radius=radius) for si in s])
    if k == 0:
        return rate
    tails = np.array([wall_chord_tail(u, theta, radius) for u in s])
    dens = -np.gradient(tails, s)
    cur = rate
    for _ in range(k):
        cur = np.convolve(cur, dens)[: len(s)] * (s[1] - s[0])
    return cur


def dyson_iterate_quadrature(phase_grid, k, t, speed_density, theta=1.0, n_s=2000):
    """Phase-cell masses of the k-th bounce iterate at time t (k = 1 or 2)
    for a uniform isotropic datum on a constant-temperature disk.

    The nested boundary integrals collapse: the value at (x, v) is the wall
    Maxwellian times the class-(k-1) arrival flux evaluated at the backward
    entry time of (x, v).
    """
    if k not in (1, 2):
        raise ValueError("bounce iterates are assembled for k = 1 or 2 only")
    p = phase_grid
    R = p.domain.radius
    if t <= 0:
        return p.zeros()
    s = np.linspace(0.0, t, n_s)
    rate = arrival_rate_chain(s, k - 1, speed_density, theta, R)
    gamma = np.sqrt(theta / (2 * np.pi))
    cents = p.position_centroids() - np.asarray(p.domain.center)
    u = np.stack([np.cos(p.omega_cent), np.sin(p.omega_cent)], axis=-1)
    b = np.einsum("raq,wq->raw", cents, u)
    c0 = np.sum(cents * cents, axis=-1)[:, :, None] - R * R
    back_dist = np.sqrt(np.maximum(b * b - c0, 0.0)) + b
    out = p.zeros()
    mw = maxwellian_radial(p.rho_cent, theta, 2)
    for il in range(p.n_rho):
        t_back = back_dist / p.rho_cent[il]
        flux = np.interp(t - t_back, s, rate, left=0.0, right=0.0)
        flux[t_back >= t] = 0.0
        dens = flux / (2 * np.pi * R) * mw[il] / gamma
        out[:, :, :, il] = dens * p.pos_vol[:, :, None] * (
            np.diff(p.omega_edges)[None, None, :] * p.rho_m0[il]
        )
    return out


def bounce_mass_quadrature(t, k, speed_density, theta=1.0, radius=1.0, n_s=2000):
    """Mass of the k-th bounce class at time t by renewal quadrature.

    Class 0 is the free survival; higher classes convolve the first-arrival
    rate with the wall-law chord distribution.
    """
    if k == 0:
        return free_survival(t, speed_density, radius=radius)
    s = np.linspace(0.0, t, n_s)
    rate = np.array([first_arrival_rate(si, speed_density, radius=radius) for si in s])
    tails = np.array([wall_chord_tail(u, theta, radius) for u in s])
    dens = -np.gradient(tails, s)
    cur = rate
    for _ in range(k - 1):
        # renewal: next-class arrival rate = current (*) chord-time density
        conv = np.convolve(cur, dens)[: len(s)] * (s[1] - s[0])
        cur = conv
    inflight = np.array(
        [
            np.trapezoid(cur[: i + 1] * tails[i::-1], s[: i + 1]) if i > 0 else 0.0
            for i in range(len(s))
        ]
    )
    return float(inflight[-1])


# ---------------------------------------------------------------------------
# rate fitting


class InsufficientSignalError(RuntimeError):
    pass


@dataclass
class RateFit:
    slope: float
    intercept: float
    ci_halfwidth: float
    window: tuple
    n_points: int


def fit_rate(times, values, stderr=None, window=None, min_points=5, signal_factor=5.0) -> RateFit:
    """Weighted least squares on (log t, log value) with batch-style CI.

    Points whose value is below ``signal_factor`` times their standard
    error are excluded; fewer than ``min_points`` surviving points raise.
    """
    times = np.asarray(times, float)
    values = np.asarray(values, float)
    sel = np.isfinite(values) & (values > 0)
    if window is not None:
        sel &= (times >= window[0]) & (times <= window[1])
    if stderr is not None:
        stderr = np.asarray(stderr, float)
        sel &= values > signal_factor * stderr
    if np.sum(sel) < min_points:
        raise InsufficientSignalError(
            f"only {int(np.sum(sel))} usable points in the fit window"
        )
    x = np.log(times[sel])
    y = np.log(values[sel])
    if stderr is not None:
        w = (values[sel] / stderr[sel]) ** 2
    else:
        w = np.ones_like(x)
    W = np.sum(w)
    xm = np.sum(w * x) / W
    ym = np.sum(w * y) / W
    sxx = np.sum(w * (x - xm) ** 2)
    slope = np.sum(w * (x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    dof = max(len(x) - 2, 1)
    var_slope = np.sum(w * resid**2) / dof / sxx
    ci = 2.0 * np.sqrt(var_slope)
    return RateFit(
        slope=float(slope),
        intercept=float(intercept),
        ci_halfwidth=float(ci),
        window=(float(times[sel].min()), float(times[sel].max())),
        n_points=int(np.sum(sel)),
    )
