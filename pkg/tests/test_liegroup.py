import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from nbvgrasp.diffgraph import numerical_gradient
from nbvgrasp.liegroup import (
    DegenerateRotationError,
    GraspPose,
    compose,
    inverse,
    perturb,
    pose_distance,
    random_rotations,
    relative_log,
    retract,
    rotation_angle,
    se3_exp,
    se3_left_jacobian,
    se3_left_jacobian_inv,
    se3_log,
    skew,
    so3_exp,
    so3_left_jacobian,
    so3_left_jacobian_inv,
    so3_log,
    stack_poses,
    tangent_point_velocity,
    zeta_log_density,
    zeta_score,
)

from conftest import random_tangents

rotvecs = arrays(np.float64, 3, elements=st.floats(-1.7, 1.7))
tangents = arrays(np.float64, 6, elements=st.floats(-1.7, 1.7))


def hat6(xi):
    out = np.zeros((4, 4))
    out[:3, :3] = skew(xi[3:])
    out[:3, 3] = xi[:3]
    return out


def test_so3_exp_matches_scipy(rng):
    w = random_tangents(rng, 500)[:, 3:]
    assert np.allclose(so3_exp(w), Rotation.from_rotvec(w).as_matrix(), atol=1e-13)


def test_se3_exp_matches_matrix_exponential(rng):
    for xi in random_tangents(rng, 50):
        assert np.allclose(se3_exp(xi).as_matrix(), expm(hat6(xi)), atol=1e-12)


def test_identity_maps_to_zero():
    assert np.array_equal(se3_log(GraspPose.identity()), np.zeros(6))
    assert np.allclose(so3_exp(np.zeros(3)), np.eye(3))


def test_quarter_turn_about_z():
    R = so3_exp(np.array([0, 0, np.pi / 2]))
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_log_near_pi_raises():
    with pytest.raises(DegenerateRotationError):
        so3_log(so3_exp(np.array([np.pi, 0, 0])))


def test_roundtrip_10k(rng):
    xi = random_tangents(rng, 10_000)
    assert np.max(np.abs(se3_log(se3_exp(xi)) - xi)) <= 1e-9


def test_small_angle_branch_continuous():
    for t in (1e-9, 1e-7, 1e-3, 0.099, 0.101):
        w = np.array([t, -0.3 * t, 0.5 * t])
        assert np.allclose(so3_left_jacobian(w) @ so3_left_jacobian_inv(w), np.eye(3), atol=1e-13)
        assert np.allclose(so3_log(so3_exp(w)), w, rtol=1e-10, atol=1e-18)


@given(tangents)
def test_left_jacobian_inverse(xi):
    assert np.allclose(se3_left_jacobian(xi) @ se3_left_jacobian_inv(xi), np.eye(6), atol=1e-10)


@given(tangents)
def test_left_jacobian_matches_finite_differences(xi):
    # exp(xi + d) ~ exp(J_l(xi) d) exp(xi)
    base = se3_exp(xi)
    num = np.zeros((6, 6))
    h = 1e-6
    for i in range(6):
        d = np.zeros(6)
        d[i] = h
        plus = se3_log(compose(se3_exp(xi + d), inverse(base)))
        minus = se3_log(compose(se3_exp(xi - d), inverse(base)))
        num[:, i] = (plus - minus) / (2 * h)
    assert np.allclose(num, se3_left_jacobian(xi), atol=1e-7)


@given(rotvecs)
def test_rotation_is_orthonormal(w):
    R = so3_exp(w)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)


@given(tangents, tangents)
def test_compose_inverse_and_distance(a, b):
    ga, gb = se3_exp(a), se3_exp(b)
    e = compose(compose(ga, gb), inverse(gb))
    assert np.allclose(e.as_matrix(), ga.as_matrix(), atol=1e-12)
    ang, dt = pose_distance(ga, ga)
    assert ang < 1e-7 and dt == 0


def test_rotation_angle_at_pi():
    R = so3_exp(np.array([0, np.pi, 0]))
    assert np.isclose(rotation_angle(R), np.pi)


def test_quaternion_roundtrip(rng):
    g = GraspPose(random_rotations(20, rng), rng.standard_normal((20, 3)))
    q = g.to_quat_xyz()
    assert np.all(q[:, 0] >= 0)
    back = GraspPose.from_quat_xyz(q)
    assert np.allclose(back.as_matrix(), g.as_matrix(), atol=1e-12)


def test_bad_shapes_rejected():
    with pytest.raises(ValueError):
        GraspPose(np.eye(3), np.zeros(2))
    with pytest.raises(ValueError):
        perturb(GraspPose.identity(), -1.0, np.random.default_rng(0))


def test_random_rotations_are_haar(rng):
    # mean of a Haar rotation matrix is zero
    R = random_rotations(20_000, rng)
    assert np.abs(R.mean(axis=0)).max() < 0.02


def test_zeta_score_matches_finite_differences(rng):
    xi = random_tangents(rng, 20, max_angle=2.5, trans=0.3)
    g = GraspPose(random_rotations(20, rng), rng.standard_normal((20, 3)))
    gamma = retract(g, xi)
    sigma = 0.7
    score = zeta_score(gamma, g, sigma)
    for i in range(20):
        f = lambda e: zeta_log_density(retract(gamma[i], e), g[i], sigma)
        num = numerical_gradient(f, np.zeros(6), h=1e-6)
        assert np.max(np.abs(num - score[i]) / np.maximum(1.0, np.abs(score[i]))) <= 1e-4


def test_zeta_score_small_offset_is_minus_xi_over_sigma2():
    g = GraspPose.identity()
    xi = np.array([1e-4, 0, 0, 0, 2e-4, 0])
    s = zeta_score(se3_exp(xi), g, 0.1)
    assert np.allclose(s, -xi / 0.01, rtol=1e-3, atol=1e-5)


def test_relative_log_is_retract_inverse(rng):
    g = GraspPose(random_rotations(5, rng), rng.standard_normal((5, 3)))
    xi = random_tangents(rng, 5, trans=0.2)
    assert np.allclose(relative_log(retract(g, xi), g), xi, atol=1e-10)


def test_tangent_point_velocity_fd(rng):
    R = random_rotations(1, rng)[0]
    g = GraspPose(R, np.zeros(3))
    pts = rng.standard_normal((4, 3))
    vel = tangent_point_velocity(pts, R)
    h = 1e-6
    for i in range(6):
        d = np.zeros(6)
        d[i] = h
        num = (retract(g, d).transform_points(pts) - retract(g, -d).transform_points(pts)) / (2 * h)
        assert np.allclose(num, vel[i], atol=1e-8)


def test_stack_and_index():
    g = stack_poses([se3_exp(np.full(6, 0.1 * i)) for i in range(3)])
    assert g.batch_shape == (3,) and len(g) == 3
    assert np.allclose(g[1].translation, se3_exp(np.full(6, 0.1)).translation)
