import math

import numpy as np
import pytest

from blockloc.deskew import DeskewStats, RawScan, deskew_scan, estimate_twist, reskew_points
from blockloc.geometry import PoseSE3, TwistSe3, se3_exp, so3_exp
from blockloc.imu_preint import ImuSample

from conftest import random_pose


def test_twist_of_identical_poses_is_zero(rng):
    p = random_pose(rng)
    assert np.allclose(estimate_twist(p, p).vector, 0, atol=1e-12)


def test_twist_of_unit_x_step():
    a = PoseSE3.identity()
    b = PoseSE3.from_xyz_yaw(1, 0, 0, 0)
    assert np.allclose(estimate_twist(a, b).vector, [1, 0, 0, 0, 0, 0])


def test_twist_round_trip(rng):
    for _ in range(100):
        a, b = random_pose(rng), random_pose(rng)
        rel = se3_exp(estimate_twist(a, b))
        assert np.allclose(rel.matrix(), (a.inverse() @ b).matrix(), atol=1e-9)


def test_zero_motion_is_bit_exact(rng):
    pts = rng.normal(size=(100, 3))
    scan = RawScan(0.0, 0.1, pts, np.linspace(0, 1, 100))
    out = deskew_scan(scan, TwistSe3.zero())
    assert out.points.tobytes() == pts.tobytes()
    assert out.stamp == 0.0


def test_zero_twist_zero_gyro_identity(rng):
    pts = rng.normal(size=(50, 3))
    scan = RawScan(1.0, 1.1, pts, np.linspace(0, 1, 50))
    gyro = [ImuSample(1.0 + 0.005 * i, [0, 0, 9.81], [0, 0, 0]) for i in range(21)]
    assert np.array_equal(deskew_scan(scan, TwistSe3.zero(), gyro).points, pts)


def test_pure_translation_linear_in_alpha():
    v, dt = 2.0, 0.1
    pts = np.zeros((3, 3))
    scan = RawScan(0.0, dt, pts, [0.0, 0.5, 1.0])
    out = deskew_scan(scan, [v * dt, 0, 0, 0, 0, 0]).points
    assert np.allclose(out, [[0, 0, 0], [v * dt / 2, 0, 0], [v * dt, 0, 0]], atol=1e-15)


def test_displacement_monotone_in_alpha(rng):
    alphas = np.linspace(0, 1, 50)
    pts = rng.normal(size=(50, 3))
    out = deskew_scan(RawScan(0.0, 0.1, pts, alphas), [0.3, -0.2, 0.1, 0, 0, 0]).points
    disp = np.linalg.norm(out - pts, axis=1)
    assert np.all(np.diff(disp) >= -1e-15)
    assert np.array_equal(out[0], pts[0])


def spinning_wall_scan(rng, omega=1.5, period=0.1, n=400, sigma=0.0):
    """Sensor spinning about z at the origin, seeing the wall x = 10."""
    alphas = np.sort(rng.uniform(0, 1, n))
    ys = rng.uniform(-5, 5, n)
    zs = rng.uniform(-1, 1, n)
    world = np.column_stack([np.full(n, 10.0), ys, zs])
    pts = np.empty_like(world)
    for i, a in enumerate(alphas):
        R = so3_exp([0, 0, omega * a * period])
        local = R.T @ world[i]
        if sigma:
            local *= 1 + sigma * rng.standard_normal() / np.linalg.norm(local)
        pts[i] = local
    gyro = [ImuSample(0.005 * k - 0.01, [0, 0, 9.81], [0, 0, omega]) for k in range(int(period / 0.005) + 5)]
    return RawScan(0.0, period, pts, alphas), gyro


def test_spinning_platform_collapses_wall(rng):
    sigma = 0.02
    scan, gyro = spinning_wall_scan(rng, sigma=sigma)
    before = np.abs(scan.points[:, 0] - 10).max()
    out = deskew_scan(scan, TwistSe3.zero(), gyro).points
    # closed-form compensation: rotate each point by the yaw accumulated at its alpha
    oracle = np.array([so3_exp([0, 0, 1.5 * a * 0.1]) @ p for a, p in zip(scan.t_rel, scan.points)])
    assert np.allclose(out, oracle, atol=1e-12)
    assert np.abs(out[:, 0] - 10).max() < 2 * 3 * sigma
    assert before > 0.3


def test_gyro_gap_falls_back_to_twist(rng):
    scan, gyro = spinning_wall_scan(rng)
    gappy = [s for s in gyro if not 0.02 < s.stamp < 0.06]
    stats = DeskewStats()
    twist = [0, 0, 0, 0, 0, 1.5 * 0.1]
    out = deskew_scan(scan, twist, gappy, stats=stats).points
    assert stats.gyro_fallbacks == 1
    assert np.allclose(out, deskew_scan(scan, twist).points)


def test_gyro_bias_removed(rng):
    scan, gyro = spinning_wall_scan(rng)
    biased = [ImuSample(s.stamp, s.accel, s.gyro + [0.01, -0.02, 0.03]) for s in gyro]
    a = deskew_scan(scan, TwistSe3.zero(), gyro).points
    b = deskew_scan(scan, TwistSe3.zero(), biased, gyro_bias=np.array([0.01, -0.02, 0.03])).points
    assert np.allclose(a, b, atol=1e-12)


def test_reskew_inverts_deskew(rng):
    pts = rng.normal(size=(200, 3)) * 10
    alphas = rng.uniform(0, 1, 200)
    twist = TwistSe3.from_vector([0.5, -0.1, 0.05, 0.02, -0.01, 0.2])
    out = deskew_scan(RawScan(0.0, 0.1, pts, alphas), twist).points
    assert np.allclose(reskew_points(out, alphas, twist), pts, atol=1e-6)


def test_twist_translation_follows_exponential(rng):
    twist = TwistSe3.from_vector([0.5, 0.2, 0.0, 0.0, 0.0, 0.4])
    alphas = np.linspace(0, 1, 7)
    out = deskew_scan(RawScan(0.0, 0.1, np.zeros((7, 3)), alphas), twist).points
    for a, p in zip(alphas, out):
        assert np.allclose(p, se3_exp(twist.scaled(a)).translation, atol=1e-12)
