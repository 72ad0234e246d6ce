import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_jacobians, random_pose
from cooploc.se2 import (
    GaussianPose,
    Pose2,
    angle_sq_diff,
    between_xyt,
    compose_xyt,
    inverse_xyt,
    jacobians_between,
    jacobians_compose,
    pose_distance,
    repair_psd,
    symmetrize,
    wrap_angle,
    wrap_angle_array,
)

angles = st.floats(-50.0, 50.0, allow_nan=False)
coords = st.floats(-100.0, 100.0, allow_nan=False)
poses = st.builds(Pose2, coords, coords, angles)


# ----------------------------------------------------------------------
# angle wrapping


def test_wrap_angle_range_boundaries():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert wrap_angle(0.0) == 0.0


def test_wrap_angle_passthrough_is_bit_exact():
    # In-range values must not be perturbed by a sin/cos/atan2 round trip.
    for a in (0.3, -1.25, math.pi, math.nextafter(-math.pi, 0.0), 1e-300):
        assert wrap_angle(a) == a


@given(angles)
def test_wrap_angle_idempotent(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert wrap_angle(w) == w


def test_wrap_angle_array_matches_scalar():
    a = np.array([0.0, math.pi, -math.pi, 7.0, -9.4, 3 * math.pi / 2])
    w = wrap_angle_array(a)
    assert w.tolist() == [wrap_angle(v) for v in a]


def test_wrap_angle_array_in_range_passthrough():
    a = np.array([0.1, -3.0, math.pi])
    assert wrap_angle_array(a).tolist() == a.tolist()


def test_angle_sq_diff():
    assert angle_sq_diff(0.0) == 0.0
    assert angle_sq_diff(2 * math.pi) == pytest.approx(0.0, abs=1e-30)
    assert angle_sq_diff(3 * math.pi / 2) == pytest.approx((math.pi / 2) ** 2)
    assert angle_sq_diff(1.0, 0.25) == pytest.approx(0.75**2)


# ----------------------------------------------------------------------
# group operations


def test_compose_examples():
    assert Pose2(1, 0, 0).compose(Pose2(1, 0, 0)) == Pose2(2, 0, 0)
    p = Pose2(0, 0, math.pi / 2).compose(Pose2(1, 0, 0))
    assert p.x == pytest.approx(0.0, abs=1e-15)
    assert p.y == pytest.approx(1.0)
    assert p.theta == pytest.approx(math.pi / 2)


@given(poses)
def test_compose_identity(a):
    assert a.compose(Pose2(0, 0, 0)) == a


def test_between_examples():
    # Frozen from the homogeneous-matrix oracle T_a^-1 @ T_b.
    r = Pose2(0, 0, math.pi / 2).between(Pose2(1, 1, 0))
    assert r.as_array() == pytest.approx([1.0, -1.0, -math.pi / 2])


@given(poses)
def test_between_self_is_identity(s):
    r = s.between(s)
    assert r.x == 0.0 and r.y == 0.0 and r.theta == 0.0


@given(poses, poses)
def test_between_inverts_compose(a, b):
    r = a.between(a.compose(b))
    assert r.as_array() == pytest.approx(b.as_array(), abs=1e-9)


def test_inverse_examples():
    assert Pose2(0, 0, 0).inverse() == Pose2(0, 0, 0)
    assert Pose2(1, 0, 0).inverse() == Pose2(-1, 0, 0)
    # Frozen from the matrix-inverse oracle.
    inv = Pose2(0, 1, math.pi / 2).inverse()
    assert inv.as_array() == pytest.approx([-1.0, 0.0, -math.pi / 2])


@given(poses)
def test_inverse_cancels(a):
    r = a.compose(a.inverse())
    assert r.as_array() == pytest.approx([0, 0, 0], abs=1e-9)


@given(poses, poses, poses)
def test_compose_associative(a, b, c):
    lhs = a.compose(b).compose(c)
    rhs = a.compose(b.compose(c))
    assert lhs.x == pytest.approx(rhs.x, abs=1e-9)
    assert lhs.y == pytest.approx(rhs.y, abs=1e-9)
    assert angle_sq_diff(lhs.theta, rhs.theta) < 1e-24


@given(poses, poses)
def test_between_equals_inverse_compose(a, b):
    lhs = a.between(b)
    rhs = a.inverse().compose(b)
    assert lhs.as_array() == pytest.approx(rhs.as_array(), abs=1e-9)


@given(poses, poses)
def test_normalized_theta_everywhere(a, b):
    for p in (a.compose(b), a.between(b), a.inverse()):
        assert -math.pi < p.theta <= math.pi


# ----------------------------------------------------------------------
# array variants agree with the scalar path


@given(poses, poses)
def test_xyt_variants_match_pose2(a, b):
    assert compose_xyt(a.as_array(), b.as_array()) == pytest.approx(
        a.compose(b).as_array()
    )
    assert between_xyt(a.as_array(), b.as_array()) == pytest.approx(
        a.between(b).as_array()
    )
    assert inverse_xyt(a.as_array()) == pytest.approx(a.inverse().as_array())


def test_xyt_broadcasting():
    a = np.stack([Pose2(1, 2, 0.3).as_array()] * 4)
    b = Pose2(0.5, -0.25, -0.1).as_array()
    out = compose_xyt(a, b)
    assert out.shape == (4, 3)
    assert np.ptp(out, axis=0) == pytest.approx([0, 0, 0])


# ----------------------------------------------------------------------
# Jacobians


def test_jacobian_compose_identity_case():
    ja, jb = jacobians_compose(Pose2(0, 0, 0), Pose2(0, 0, 0))
    assert ja == pytest.approx(np.eye(3))
    assert jb == pytest.approx(np.eye(3))


def test_jacobian_compose_unit_translation():
    ja, _ = jacobians_compose(Pose2(0, 0, 0), Pose2(1, 0, 0))
    assert ja == pytest.approx(np.array([[1, 0, 0], [0, 1, 1], [0, 0, 1.0]]))


def test_jacobian_between_identity_case():
    _, jb = jacobians_between(Pose2(0, 0, 0), Pose2(0, 0, 0))
    assert jb == pytest.approx(np.eye(3))


def test_jacobians_match_finite_differences():
    "1000 random inputs for each analytic Jacobian pair."
    rng = np.random.default_rng(11)
    for _ in range(1000):
        a, b = random_pose(rng), random_pose(rng)
        for analytic, fn in (
            (jacobians_compose, Pose2.compose),
            (jacobians_between, Pose2.between),
        ):
            ja, jb = analytic(a, b)
            na, nb = fd_jacobians(fn, a, b)
            assert ja == pytest.approx(na, abs=1e-6)
            assert jb == pytest.approx(nb, abs=1e-6)


def test_jacobian_between_at_equal_poses():
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = random_pose(rng)
        assert a.between(a).as_array() == pytest.approx([0, 0, 0])
        ja, jb = jacobians_between(a, a)
        na, nb = fd_jacobians(Pose2.between, a, a)
        assert ja == pytest.approx(na, abs=1e-6)
        assert jb == pytest.approx(nb, abs=1e-6)


# ----------------------------------------------------------------------
# pose distance


def test_pose_distance_examples():
    p = Pose2(1, 2, 0.5)
    assert pose_distance(p, p, 3.0) == 0.0
    assert pose_distance(Pose2(0, 0, 0), Pose2(3, 4, 0), 7.0) == pytest.approx(25.0)
    assert pose_distance(Pose2(0, 0, 0), Pose2(0, 0, math.pi), 2.0) == pytest.approx(
        2 * math.pi**2
    )


@given(poses, poses, st.floats(0.0, 100.0))
def test_pose_distance_nonnegative_and_symmetric(p, q, w):
    d = pose_distance(p, q, w)
    assert d >= 0.0
    assert d == pytest.approx(pose_distance(q, p, w), rel=1e-12, abs=1e-12)


# ----------------------------------------------------------------------
# covariance utilities


def test_symmetrize():
    m = np.array([[1.0, 2.0, 0.0], [0.0, 1.0, 4.0], [0.0, 0.0, 1.0]])
    s = symmetrize(m)
    assert np.allclose(s, s.T)
    assert s[0, 1] == pytest.approx(1.0)


def test_repair_psd_clamps_negative_eigenvalues():
    m = np.diag([1.0, -0.5, 2.0])
    r = repair_psd(m, floor=1e-9)
    evals = np.linalg.eigvalsh(r)
    assert evals.min() >= 1e-9 - 1e-15
    assert r[0, 0] == pytest.approx(1.0)
    assert r[2, 2] == pytest.approx(2.0)


def test_repair_psd_leaves_psd_input_nearly_unchanged():
    rng = np.random.default_rng(5)
    a = rng.normal(size=(3, 3))
    m = a @ a.T + 0.1 * np.eye(3)
    assert repair_psd(m) == pytest.approx(m, abs=1e-12)


def test_gaussian_pose_validates():
    g = GaussianPose(Pose2(0, 0, 0), np.eye(3) * 0.1)
    assert g.cov == pytest.approx(g.cov.T)
    with pytest.raises(ValueError):
        GaussianPose(Pose2(0, 0, 0), np.eye(2))


@settings(max_examples=30)
@given(poses, poses)
def test_gaussian_pose_equality(a, b):
    ga = GaussianPose(a, np.eye(3))
    assert ga == GaussianPose(a, np.eye(3))
    if a != b:
        assert ga != GaussianPose(b, np.eye(3))
