import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinrelax.geometry import (
    GRAZING,
    Domain,
    GrazingRayError,
    NoFootError,
    OutsideDomainError,
    PhasePoint,
    boundary_foot,
    chord_time,
    classify_side,
    disk_chord_data,
    exit_time,
    forward_exit,
)

DISK = Domain(dim=2)
BALL = Domain(dim=3)


def test_exit_time_center_backward():
    assert exit_time(DISK, [0.0, 0.0], [1.0, 0.0], "backward") == pytest.approx(1.0)


def test_exit_time_scaling_value():
    # unit-speed forward time from (0.5, 0) along +x is 0.5; speed 2 halves it
    assert exit_time(DISK, [0.5, 0.0], [2.0, 0.0], "forward") == pytest.approx(0.25)


def test_exit_time_transverse():
    # oracle: ray-circle quadratic, x=(0.5,0), v=(0,1): t = sqrt(1-0.25)
    t = exit_time(DISK, [0.5, 0.0], [0.0, 1.0], "forward")
    assert t == pytest.approx(np.sqrt(0.75), abs=1e-14)


def test_exit_time_zero_velocity_is_inf():
    assert np.isinf(exit_time(DISK, [0.1, 0.2], [0.0, 0.0], "forward"))


def test_exit_time_outside_raises():
    with pytest.raises(OutsideDomainError):
        exit_time(DISK, [1.5, 0.0], [1.0, 0.0])


def test_boundary_foot_center():
    foot, t = boundary_foot(DISK, [0.0, 0.0], [1.0, 0.0])
    assert np.allclose(foot, [-1.0, 0.0], atol=1e-14)
    assert t == pytest.approx(1.0)


def test_boundary_foot_offcenter():
    foot, t = boundary_foot(DISK, [0.5, 0.0], [1.0, 0.0])
    assert np.allclose(foot, [-1.0, 0.0], atol=1e-14)
    assert t == pytest.approx(1.5)


def test_boundary_foot_on_incoming_boundary_point_is_itself():
    # x on the boundary with v.n < 0: backward time 0, foot = x
    x = np.array([1.0, 0.0])
    v = np.array([-1.0, 0.3])
    foot, t = boundary_foot(DISK, x, v)
    assert t == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(foot, x, atol=1e-12)


def test_boundary_foot_zero_velocity_raises():
    with pytest.raises(NoFootError):
        boundary_foot(DISK, [0.0, 0.0], [0.0, 0.0])


def test_chord_time_diameter():
    assert chord_time(DISK, [1.0, 0.0], [1.0, 0.0]) == pytest.approx(2.0)


def test_chord_time_speed_scaling():
    assert chord_time(DISK, [1.0, 0.0], [2.0, 0.0]) == pytest.approx(1.0)


def test_chord_time_oblique_incidence():
    # chord at 60 degrees to the normal: length 2 R cos(60) = 1
    x = np.array([1.0, 0.0])
    ang = np.deg2rad(60.0)
    v = np.cos(ang) * np.array([1.0, 0.0]) + np.sin(ang) * np.array([0.0, 1.0])
    assert chord_time(DISK, x, v) == pytest.approx(1.0, abs=1e-14)


def test_chord_time_grazing_raises():
    with pytest.raises(GrazingRayError):
        chord_time(DISK, [1.0, 0.0], [0.0, 1.0])


def test_classify_side():
    x = np.array([1.0, 0.0])
    assert classify_side(DISK, x, [1.0, 0.1]) == 1
    assert classify_side(DISK, x, [-1.0, 0.1]) == -1
    assert classify_side(DISK, x, [0.0, 1.0]) == GRAZING


def test_phase_point_validation():
    PhasePoint([0.3, 0.1], [1.0, 2.0], DISK)
    with pytest.raises(OutsideDomainError):
        PhasePoint([1.2, 0.0], [1.0, 0.0], DISK)


@st.composite
def interior_points(draw, dim):
    r = draw(st.floats(0.0, 0.999))
    angs = [draw(st.floats(0.0, 2 * np.pi)) for _ in range(dim - 1)]
    if dim == 2:
        x = r * np.array([np.cos(angs[0]), np.sin(angs[0])])
    else:
        th = draw(st.floats(0.0, np.pi))
        x = r * np.array(
            [np.sin(th) * np.cos(angs[0]), np.sin(th) * np.sin(angs[0]), np.cos(th)]
        )
    vraw = [draw(st.floats(-3.0, 3.0)) for _ in range(dim)]
    return x, np.array(vraw)


@settings(max_examples=200, deadline=None)
@given(data=interior_points(2), c=st.floats(1e-6, 1e6))
def test_exit_time_speed_scaling_property(data, c):
    x, v = data
    if np.linalg.norm(v) < 1e-100:  # subnormal |v|^2 underflows
        return
    t1 = exit_time(DISK, x, v, "forward")
    t2 = exit_time(DISK, x, c * v, "forward")
    assert t2 * c == pytest.approx(t1, rel=1e-12, abs=1e-300)


@settings(max_examples=200, deadline=None)
@given(data=interior_points(3))
def test_exit_bound_and_additivity(data):
    x, v = data
    speed = np.linalg.norm(v)
    if speed == 0.0:
        return
    tf = exit_time(BALL, x, v, "forward")
    tb = exit_time(BALL, x, v, "backward")
    assert tf * speed <= BALL.diameter + 1e-12
    assert tb * speed <= BALL.diameter + 1e-12
    # chord additivity: t+ + t- equals the chord time at the backward foot
    foot, tb2 = boundary_foot(BALL, x, v)
    assert tb2 == pytest.approx(tb)
    if classify_side(BALL, foot, v) == -1:
        assert chord_time(BALL, foot, v) == pytest.approx(tf + tb, rel=1e-10, abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(data=interior_points(2))
def test_foot_roundtrip(data):
    x, v = data
    if np.linalg.norm(v) < 1e-9:
        return
    foot, tb = boundary_foot(DISK, x, v)
    assert np.abs(np.linalg.norm(foot) - 1.0) <= 1e-10 * DISK.diameter
    exit_pt, tf = forward_exit(DISK, x, v)
    assert np.abs(np.linalg.norm(exit_pt) - 1.0) <= 1e-10 * DISK.diameter
    # re-entering the foot reproduces the full chord
    if classify_side(DISK, foot, v) == -1:
        assert chord_time(DISK, foot, v) == pytest.approx(tb + tf, rel=1e-10, abs=1e-10)


def test_disk_chord_data_matches_ray_tracing():
    rng = np.random.default_rng(42)
    alpha = rng.uniform(0, 2 * np.pi, 64)
    psi = rng.uniform(-np.pi / 2 + 0.05, np.pi / 2 - 0.05, 64)
    speed = rng.uniform(0.1, 5.0, 64)
    exit_angle, tau, sigma = disk_chord_data(DISK, alpha, psi, speed)
    start = DISK.boundary_point(alpha)
    v = speed[:, None] * sigma
    end_pt, t = forward_exit(DISK, start, v)
    assert np.allclose(t, tau, rtol=1e-12)
    expected = DISK.boundary_point(exit_angle)
    assert np.allclose(end_pt, expected, atol=1e-9)
    # arrival local angle in the outgoing frame equals psi
    n_end = DISK.normal(end_pt)
    t_end = np.stack([-n_end[:, 1], n_end[:, 0]], axis=-1)
    psi_out = np.arctan2(np.sum(sigma * t_end, -1), np.sum(sigma * n_end, -1))
    assert np.allclose(psi_out, psi, atol=1e-12)


def test_ball_volume_surface():
    assert BALL.volume == pytest.approx(4 * np.pi / 3)
    assert BALL.surface == pytest.approx(4 * np.pi)
    assert DISK.volume == pytest.approx(np.pi)
    assert DISK.surface == pytest.approx(2 * np.pi)
