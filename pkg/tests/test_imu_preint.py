import numpy as np
import pytest

from blockloc.errors import BadImuStream
from blockloc.geometry import PoseSE3, so3_exp
from blockloc.imu_preint import (
    GRAVITY, ImuBias, ImuSample, NavState, estimate_gravity, forward_propagate, imu_residual, imu_segment,
    preintegrate, predict_state,
)
from blockloc.tracker import KeyframeState

from conftest import random_pose

RATE = 200.0


def stream(n, accel, gyro, t0=0.0):
    return [ImuSample(t0 + k / RATE, accel(k) if callable(accel) else accel, gyro(k) if callable(gyro) else gyro)
            for k in range(n)]


def random_stream(rng, n=101, t0=0.0):
    acc = rng.normal(size=(n, 3)) + [0, 0, 9.81]
    gyr = rng.normal(scale=0.5, size=(n, 3))
    return [ImuSample(t0 + k / RATE, acc[k], gyr[k]) for k in range(n)]


def random_state(rng, stamp=0.0):
    return KeyframeState(stamp, random_pose(rng), rng.normal(size=3),
                         ImuBias(rng.normal(scale=0.01, size=3), rng.normal(scale=0.05, size=3)))


def test_single_sample_is_identity():
    d = preintegrate([ImuSample(0.0, [1, 2, 3], [0.1, 0.2, 0.3])])
    assert np.array_equal(d.dR, np.eye(3)) and not d.dv.any() and not d.dp.any() and d.dt == 0


def test_constant_rate_rotation():
    d = preintegrate(stream(101, np.zeros(3), [0, 0, 1.0]))
    assert d.dt == pytest.approx(0.5, abs=1e-12)
    assert np.allclose(d.dR, so3_exp([0, 0, 0.5]), atol=1e-6)


def test_constant_accel_kinematics():
    a = np.array([0.3, -0.2, 1.1])
    d = preintegrate(stream(201, a, np.zeros(3)))
    assert np.allclose(d.dv, a * d.dt, atol=1e-9)
    assert np.allclose(d.dp, 0.5 * a * d.dt**2, atol=1e-9)


def test_non_monotonic_stamps_raise():
    s = stream(5, np.zeros(3), np.zeros(3))
    s[2], s[3] = s[3], s[2]
    with pytest.raises(BadImuStream):
        preintegrate(s)


def test_dt_is_sum_of_intervals(rng):
    stamps = np.cumsum(rng.uniform(0.002, 0.01, 50))
    s = [ImuSample(t, [0, 0, 9.81], [0, 0, 0]) for t in stamps]
    assert preintegrate(s).dt == pytest.approx(stamps[-1] - stamps[0], abs=1e-9)


def test_covariance_psd_and_growing(rng):
    s = random_stream(rng, 201)
    traces = []
    for n in (2, 20, 60, 120, 201):
        d = preintegrate(s[:n])
        assert np.allclose(d.cov, d.cov.T)
        assert np.linalg.eigvalsh(d.cov)[0] >= -1e-18
        traces.append(np.trace(d.cov))
    assert all(b >= a for a, b in zip(traces, traces[1:]))


def test_concatenation(rng):
    s = random_stream(rng, 201)
    bias = ImuBias([0.01, -0.02, 0.005], [0.1, 0.0, -0.05])
    whole = preintegrate(s, bias)
    parts = preintegrate(s[:90], bias).compose(preintegrate(s[89:], bias))
    assert np.allclose(parts.dR, whole.dR, atol=1e-8)
    assert np.allclose(parts.dv, whole.dv, atol=1e-8)
    assert np.allclose(parts.dp, whole.dp, atol=1e-8)
    assert np.allclose(parts.cov, whole.cov, atol=1e-12)
    assert np.allclose(parts.jac, whole.jac, atol=1e-8)


def test_bias_jacobian_fidelity(rng):
    # half a second, a typical keyframe spacing
    s = random_stream(rng, 101)
    base = preintegrate(s, ImuBias())
    for scale in (1e-3, 1e-4):
        worst = 0.0
        for _ in range(10):
            nb = ImuBias.from_vector(rng.uniform(-scale, scale, 6))
            dR, dv, dp = base.corrected(nb)
            full = preintegrate(s, nb)
            worst = max(worst, *(np.abs(a - b).max() for a, b in ((dR, full.dR), (dv, full.dv), (dp, full.dp))))
        assert worst < 1e-6 * (scale / 1e-3) ** 2


def test_stationary_propagation():
    s = stream(201, -GRAVITY, np.zeros(3))
    pose = PoseSE3.from_xyz_yaw(1, 2, 3, 0.0)
    p, v = forward_propagate(NavState(pose, np.zeros(3)), s)
    assert np.allclose(p.translation, pose.translation, atol=1e-9)
    assert np.allclose(p.R, pose.R, atol=1e-12) and np.allclose(v, 0, atol=1e-9)


def test_constant_velocity_line():
    v0 = np.array([1.5, -0.5, 0.0])
    s = stream(201, -GRAVITY, np.zeros(3))
    p, v = forward_propagate(NavState(PoseSE3.identity(), v0), s)
    assert np.allclose(p.translation, v0 * 1.0, atol=1e-6)
    assert np.allclose(v, v0, atol=1e-9)


def test_propagated_state_has_zero_residual(rng):
    s = random_stream(rng)
    si = random_state(rng)
    d = preintegrate(s, si.bias)
    pose, vel = predict_state(si, d)
    sj = KeyframeState(d.dt, pose, vel, si.bias)
    r, _, _ = imu_residual(si, sj, d)
    assert np.abs(r).max() < 1e-9


def test_residual_jacobians_finite_differences(rng):
    for _ in range(10):
        s = random_stream(rng)
        si, sj = random_state(rng), random_state(rng)
        d = preintegrate(s, ImuBias(rng.normal(scale=0.01, size=3), rng.normal(scale=0.05, size=3)))
        r0, Ji, Jj = imu_residual(si, sj, d)
        h = 1e-6
        for which, J in ((0, Ji), (1, Jj)):
            fd = np.zeros((15, 15))
            for k in range(15):
                e = np.zeros(15)
                e[k] = h
                if which == 0:
                    rp = imu_residual(si.retract(e), sj, d)[0]
                    rm = imu_residual(si.retract(-e), sj, d)[0]
                else:
                    rp = imu_residual(si, sj.retract(e), d)[0]
                    rm = imu_residual(si, sj.retract(-e), d)[0]
                fd[:, k] = (rp - rm) / (2 * h)
            assert np.abs(J - fd).max() / max(np.abs(J).max(), 1.0) < 1e-5


def test_position_perturbation_touches_only_position_block(rng):
    s = random_stream(rng)
    si, sj = random_state(rng), random_state(rng)
    d = preintegrate(s, si.bias)
    r0 = imu_residual(si, sj, d)[0]
    for dist in (1e-4, 2e-4):
        moved = KeyframeState(sj.stamp, PoseSE3(sj.pose.rotation, sj.pose.translation + [dist, 0, 0]), sj.velocity, sj.bias)
        r1 = imu_residual(si, moved, d)[0]
        diff = r1 - r0
        assert np.array_equal(diff[:6], np.zeros(6)) and np.array_equal(diff[9:], np.zeros(6))
        assert np.allclose(diff[6:9], si.pose.R.T @ [dist, 0, 0], atol=1e-9)


def test_segment_interpolates_ends():
    s = stream(11, lambda k: [k, 0, 0], np.zeros(3))
    seg = imu_segment(s, 0.0125, 0.0375)
    assert seg[0].stamp == 0.0125 and seg[-1].stamp == 0.0375
    assert seg[0].accel[0] == pytest.approx(2.5) and seg[-1].accel[0] == pytest.approx(7.5)
    assert [x.stamp for x in seg[1:-1]] == [0.015, 0.02, 0.025, 0.03, 0.035]


def test_segment_outside_stream_raises():
    s = stream(11, np.zeros(3), np.zeros(3))
    with pytest.raises(BadImuStream):
        imu_segment(s, 0.0, 1.0)


def test_gravity_from_stationary_accel():
    R = so3_exp([0.1, -0.2, 0.3])
    pose = PoseSE3.from_rt(R, np.zeros(3))
    s = stream(200, R.T @ -GRAVITY, np.zeros(3))
    assert np.allclose(estimate_gravity(s, pose), GRAVITY, atol=1e-12)
