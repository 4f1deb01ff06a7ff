import numpy as np
import pytest
from scipy.linalg import expm

from blockloc.errors import InvalidAlpha, NearPiRotation
from blockloc.geometry import (
    PoseSE3,
    TwistSe3,
    hat,
    pose_interpolate,
    quat_from_rotvec,
    right_jacobian,
    right_jacobian_inv,
    se3_exp,
    se3_log,
    so3_exp,
)

from conftest import random_pose


def twist_matrix(xi):
    M = np.zeros((4, 4))
    M[:3, :3] = hat(xi[3:])
    M[:3, 3] = xi[:3]
    return M


def assert_pose_close(a, b, tol=1e-9):
    assert np.allclose(a.matrix(), b.matrix(), atol=tol)


def test_exp_zero_is_identity():
    assert_pose_close(se3_exp(np.zeros(6)), PoseSE3.identity(), 0)


def test_exp_pure_rotation():
    T = se3_exp([0, 0, 0, 0, 0, np.pi / 2])
    assert np.allclose(T.R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
    assert np.allclose(T.translation, 0)


def test_exp_matches_matrix_exponential():
    xi = np.array([1, 2, 3, 0.1, 0.2, 0.3])
    assert np.allclose(se3_exp(xi).matrix(), expm(twist_matrix(xi)), atol=1e-12)


def test_exp_small_angle_branch_matches_matrix_exponential():
    xi = np.array([0.3, -0.2, 0.5, 4e-7, -2e-7, 1e-7])
    assert np.allclose(se3_exp(xi).matrix(), expm(twist_matrix(xi)), atol=1e-13)


def test_log_identity_is_zero():
    assert np.allclose(se3_log(PoseSE3.identity()).vector, 0)


def test_log_exp_round_trip(rng):
    for _ in range(1000):
        axis = rng.normal(size=3)
        phi = axis / np.linalg.norm(axis) * rng.uniform(0, 3)
        xi = np.concatenate([rng.uniform(-10, 10, 3), phi])
        assert np.allclose(se3_log(se3_exp(xi)).vector, xi, atol=1e-9)


def test_log_near_pi_raises():
    with pytest.raises(NearPiRotation):
        se3_log(PoseSE3(quat_from_rotvec([0, 0, np.pi]), [1, 0, 0]))


def test_interpolate_endpoints_and_midpoint():
    base = PoseSE3.from_xyz_yaw(1, 2, 3, 0.4)
    xi = TwistSe3.from_vector([2, 0, 0, 0, 0, 0])
    assert_pose_close(pose_interpolate(base, xi, 0.0), base)
    assert_pose_close(pose_interpolate(base, xi, 1.0), base @ se3_exp(xi))
    mid = pose_interpolate(PoseSE3.identity(), xi, 0.5)
    assert np.allclose(mid.translation, [1, 0, 0])


@pytest.mark.parametrize("alpha", [-0.1, 1.5])
def test_interpolate_rejects_alpha(alpha):
    with pytest.raises(InvalidAlpha):
        pose_interpolate(PoseSE3.identity(), np.zeros(6), alpha)


def test_interpolation_translation_monotone():
    base = PoseSE3.from_xyz_yaw(3, -1, 0, 1.0)
    xi = [0.5, -1.2, 0.3, 0, 0, 0]
    norms = [se3_log(pose_interpolate(base, xi, a) @ base.inverse()).norm() for a in np.linspace(0, 1, 21)]
    assert all(b >= a - 1e-12 for a, b in zip(norms, norms[1:]))


def test_compose_inverse_identity(rng):
    for _ in range(200):
        P = random_pose(rng)
        I = P @ P.inverse()
        assert I.angle() < 1e-9
        assert np.linalg.norm(I.translation) < 1e-9
        assert abs(np.linalg.norm(P.rotation) - 1) < 1e-9


def test_compose_associative(rng):
    for _ in range(200):
        a, b, c = random_pose(rng), random_pose(rng), random_pose(rng)
        assert_pose_close((a @ b) @ c, a @ (b @ c))


def test_long_composition_keeps_unit_quaternion(rng):
    P = PoseSE3.identity()
    step = random_pose(rng, 0.1, 0.1)
    for _ in range(10000):
        P = P @ step
    assert abs(np.linalg.norm(P.rotation) - 1) < 1e-9
    assert P.rotation[3] >= 0


def test_operations_deterministic(rng):
    xi = rng.normal(size=6)
    a, b = se3_exp(xi), se3_exp(xi.copy())
    assert a.rotation.tobytes() == b.rotation.tobytes()
    assert se3_log(a).vector.tobytes() == se3_log(b).vector.tobytes()


def test_retract_local_inverse(rng):
    for _ in range(100):
        base = random_pose(rng)
        d = np.concatenate([rng.normal(size=3), rng.normal(size=3) * 0.5])
        assert np.allclose(base.retract(d).local(base), d, atol=1e-10)


def test_right_jacobian_first_order(rng):
    for _ in range(20):
        phi = rng.normal(size=3)
        d = rng.normal(size=3) * 1e-6
        lhs = so3_exp(phi + d)
        rhs = so3_exp(phi) @ so3_exp(right_jacobian(phi) @ d)
        assert np.abs(lhs - rhs).max() < 1e-11
        assert np.allclose(right_jacobian(phi) @ right_jacobian_inv(phi), np.eye(3), atol=1e-12)
