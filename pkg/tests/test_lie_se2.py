import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from se2diff.lie_se2 import (
    BranchAmbiguityError,
    Se2Pose,
    Twist,
    compose,
    compose_arr,
    exact_score,
    exp_map,
    exp_map_arr,
    inverse,
    inverse_arr,
    kernel_log_density,
    log_map,
    log_map_arr,
    right_jacobian,
    right_jacobian_inv_transpose,
    sample_perturbed,
    surrogate_score,
    wrap_angle,
)


def random_twists(rng, n, max_norm=10.0, omega_cap=math.pi - 0.01):
    """Twists with |omega| <= omega_cap and overall norm <= max_norm."""
    om = rng.uniform(-omega_cap, omega_cap, size=n)
    rho_cap = np.sqrt(np.maximum(max_norm**2 - om**2, 0.0))
    ang = rng.uniform(0, 2 * math.pi, size=n)
    rad = rho_cap * np.sqrt(rng.uniform(0, 1, size=n))
    return np.stack([rad * np.cos(ang), rad * np.sin(ang), om], axis=1)


def random_poses(rng, n, span=3.0):
    return np.stack(
        [
            rng.uniform(-span, span, size=n),
            rng.uniform(-span, span, size=n),
            rng.uniform(-math.pi, math.pi, size=n),
        ],
        axis=1,
    )


class TestWrap:
    def test_zero(self):
        assert wrap_angle(0.0) == 0.0

    def test_pi_included(self):
        assert wrap_angle(math.pi) == math.pi
        assert wrap_angle(-math.pi) == math.pi

    def test_multiple_turns(self):
        assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
        assert abs(wrap_angle(7.5 * math.pi - 0.3)) < math.pi


class TestExpMap:
    def test_identity(self):
        p = exp_map(Twist(0, 0, 0))
        assert p == Se2Pose.identity()

    def test_pure_translation(self):
        p = exp_map(Twist(1, 0, 0))
        assert p.theta == 0.0
        assert p.tx == pytest.approx(1.0)
        assert p.ty == pytest.approx(0.0)

    def test_quarter_turn(self):
        # oracle: truncated power series of the homogeneous matrix exponential
        p = exp_map(Twist(1, 0, math.pi / 2))
        m = oracles.series_expm(oracles.hat([1, 0, math.pi / 2]), terms=30)
        theta, tx, ty = oracles.matrix_to_pose(m)
        assert p.theta == pytest.approx(theta, abs=1e-12)
        assert p.tx == pytest.approx(tx, abs=1e-12)
        assert p.ty == pytest.approx(ty, abs=1e-12)
        assert p.tx == pytest.approx(2 / math.pi, abs=1e-12)
        assert p.ty == pytest.approx(2 / math.pi, abs=1e-12)

    def test_matches_matrix_exponential(self):
        rng = np.random.default_rng(0)
        zs = random_twists(rng, 1000)
        poses = exp_map_arr(zs)
        for z, p in zip(zs, poses):
            theta, tx, ty = oracles.matrix_to_pose(oracles.exp_twist_matrix(z))
            assert abs(wrap_angle(p[2] - theta)) < 1e-9
            assert abs(p[0] - tx) < 1e-9
            assert abs(p[1] - ty) < 1e-9

    def test_large_omega_uses_unwrapped_v(self):
        # omega beyond pi: the matrix exponential is the ground truth
        z = np.array([2.0, -1.0, 4.5])
        p = exp_map_arr(z)
        theta, tx, ty = oracles.matrix_to_pose(oracles.exp_twist_matrix(z))
        assert abs(wrap_angle(p[2] - theta)) < 1e-9
        assert abs(p[0] - tx) < 1e-9
        assert abs(p[1] - ty) < 1e-9


class TestLogMap:
    def test_identity(self):
        z = log_map(Se2Pose.identity())
        assert z == Twist(0, 0, 0)

    def test_pure_rotation(self):
        z = log_map(Se2Pose(math.pi / 2, 0, 0))
        assert z.rho_x == pytest.approx(0.0)
        assert z.rho_y == pytest.approx(0.0)
        assert z.omega == pytest.approx(math.pi / 2)

    def test_round_trip(self):
        z = Twist(0.3, -0.2, 0.9)
        back = log_map(exp_map(z))
        assert np.max(np.abs(back.as_array() - z.as_array())) < 1e-10

    def test_round_trip_sweep(self):
        rng = np.random.default_rng(1)
        zs = random_twists(rng, 1000)
        back = log_map_arr(exp_map_arr(zs))
        assert np.max(np.abs(back - zs)) < 1e-9

    def test_branch_error(self):
        with pytest.raises(BranchAmbiguityError):
            log_map(Se2Pose(math.pi, 0.5, 0.0))
        with pytest.raises(BranchAmbiguityError):
            log_map(Se2Pose(math.pi - 1e-10, 0.5, 0.0))


class TestComposeInverse:
    def test_identity_law(self):
        b = Se2Pose(0.7, 1.5, -2.0)
        assert compose(Se2Pose.identity(), b) == b
        assert compose(b, Se2Pose.identity()) == b

    def test_quarter_turn_translation(self):
        out = compose(Se2Pose(math.pi / 2, 1, 0), Se2Pose(0, 1, 0))
        assert out.theta == pytest.approx(math.pi / 2)
        assert out.tx == pytest.approx(1.0, abs=1e-12)
        assert out.ty == pytest.approx(1.0, abs=1e-12)

    def test_matches_homogeneous_product(self):
        rng = np.random.default_rng(2)
        a = random_poses(rng, 100)
        b = random_poses(rng, 100)
        out = compose_arr(a, b)
        for pa, pb, pc in zip(a, b, out):
            m = oracles.pose_to_matrix(pa[2], pa[0], pa[1]) @ oracles.pose_to_matrix(
                pb[2], pb[0], pb[1]
            )
            theta, tx, ty = oracles.matrix_to_pose(m)
            assert abs(wrap_angle(pc[2] - theta)) < 1e-12
            assert abs(pc[0] - tx) < 1e-12
            assert abs(pc[1] - ty) < 1e-12

    def test_inverse_law(self):
        rng = np.random.default_rng(3)
        ps = random_poses(rng, 200)
        ident = compose_arr(ps, inverse_arr(ps))
        assert np.max(np.abs(ident[:, :2])) < 1e-12
        assert np.max(np.abs(wrap_angle(ident[:, 2]))) < 1e-12

    def test_associativity(self):
        rng = np.random.default_rng(4)
        a, b, c = (random_poses(rng, 300) for _ in range(3))
        left = compose_arr(compose_arr(a, b), c)
        right = compose_arr(a, compose_arr(b, c))
        assert np.max(np.abs(left[:, :2] - right[:, :2])) < 1e-12
        assert np.max(np.abs(wrap_angle(left[:, 2] - right[:, 2]))) < 1e-12


class TestRightJacobian:
    def test_zero_twist_is_identity(self):
        np.testing.assert_allclose(
            right_jacobian_inv_transpose(Twist(0, 0, 0)), np.eye(3), atol=1e-14
        )

    def test_finite_difference(self):
        rng = np.random.default_rng(5)
        zs = random_twists(rng, 50, max_norm=2.0, omega_cap=2.5)
        for z in zs:
            jr = right_jacobian(Twist.from_array(z))
            jr_fd = oracles.fd_right_jacobian(z)
            rel = np.linalg.norm(jr - jr_fd) / np.linalg.norm(jr_fd)
            assert rel < 1e-4

    def test_small_twist_limit(self):
        z = Twist(0.6e-4, -0.5e-4, 0.6e-4)
        out = right_jacobian_inv_transpose(z) @ z.as_array()
        assert np.max(np.abs(out - z.as_array())) < 1e-7

    def test_branch_error(self):
        with pytest.raises(BranchAmbiguityError):
            right_jacobian(Twist(0.0, 0.0, math.pi))


class TestSamplePerturbed:
    def test_zero_draw_is_identity(self):
        x = Se2Pose(0.4, 0.2, -0.1)
        assert compose(x, exp_map(Twist(0, 0, 0))) == x

    def test_requires_positive_sigma(self):
        with pytest.raises(ValueError):
            sample_perturbed(Se2Pose.identity(), 0.0, np.random.default_rng(0))

    def test_moments(self):
        rng = np.random.default_rng(6)
        sigma = 0.3
        n = 10**5
        zs = np.array(
            [sample_perturbed(Se2Pose.identity(), sigma, rng)[1].as_array() for _ in range(n)]
        )
        assert np.max(np.abs(zs.mean(axis=0))) < 4 * sigma / math.sqrt(n)
        assert np.max(np.abs(zs.std(axis=0) / sigma - 1.0)) < 0.02


class TestScores:
    def test_surrogate_zero_at_center(self):
        x = Se2Pose(0.3, 1.0, 2.0)
        s = surrogate_score(x, x, 0.5)
        assert s.norm() < 1e-12

    def test_surrogate_arithmetic(self):
        x = Se2Pose.identity()
        xt = compose(x, exp_map(Twist(0.1, 0, 0)))
        s = surrogate_score(x, xt, 0.5)
        np.testing.assert_allclose(s.as_array(), [-0.4, 0, 0], atol=1e-12)

    def test_exact_zero_at_center(self):
        x = Se2Pose(-0.5, 0.7, 0.1)
        assert exact_score(x, x, 0.2).norm() < 1e-12

    def test_exact_matches_fd_gradient(self):
        rng = np.random.default_rng(7)
        for sigma in (0.1, 0.5):
            for _ in range(25):
                x = Se2Pose.from_array(random_poses(rng, 1)[0])
                z = Twist.from_array(rng.normal(0, sigma, 3))
                xt = compose(x, exp_map(z))
                s = exact_score(x, xt, sigma).as_array()
                x_m = oracles.pose_to_matrix(x.theta, x.tx, x.ty)
                xt_m = oracles.pose_to_matrix(xt.theta, xt.tx, xt.ty)
                fd = oracles.fd_kernel_score(x_m, xt_m, sigma)
                assert np.linalg.norm(s - fd) / np.linalg.norm(fd) < 1e-3

    def test_exact_example_value(self):
        x = Se2Pose.identity()
        z = Twist(0.1, 0, 0)
        xt = compose(x, exp_map(z))
        s = exact_score(x, xt, 0.5).as_array()
        x_m = oracles.pose_to_matrix(0, 0, 0)
        xt_m = oracles.pose_to_matrix(xt.theta, xt.tx, xt.ty)
        fd = oracles.fd_kernel_score(x_m, xt_m, 0.5)
        np.testing.assert_allclose(s, fd, rtol=1e-4, atol=1e-7)

    def test_surrogate_to_exact_quadratic(self):
        # absolute gap shrinks ~ quadratically with the twist size
        rng = np.random.default_rng(8)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        gaps = {}
        for scale in (0.1, 0.01):
            z = Twist.from_array(direction * scale)
            x = Se2Pose.identity()
            xt = compose(x, exp_map(z))
            d = exact_score(x, xt, 1.0).as_array() - surrogate_score(x, xt, 1.0).as_array()
            gaps[scale] = np.linalg.norm(d)
        ratio = gaps[0.01] / gaps[0.1]
        assert 1 / 300 < ratio < 1 / 30

    def test_relative_error_order_at_least_one(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            rels = []
            for scale in (0.1, 0.01):
                z = Twist.from_array(direction * scale)
                xt = exp_map(z)
                e = exact_score(Se2Pose.identity(), xt, 1.0).as_array()
                s = surrogate_score(Se2Pose.identity(), xt, 1.0).as_array()
                rels.append(np.linalg.norm(e - s) / np.linalg.norm(e))
            order = math.log(rels[0] / rels[1]) / math.log(10)
            # first-order convergence up to higher-order curvature terms
            assert order >= 0.97

    def test_kernel_log_density_matches_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            x = Se2Pose.from_array(random_poses(rng, 1)[0])
            z = Twist.from_array(rng.normal(0, 0.3, 3))
            xt = compose(x, exp_map(z))
            ours = kernel_log_density(x, xt, 0.5)
            x_m = oracles.pose_to_matrix(x.theta, x.tx, x.ty)
            xt_m = oracles.pose_to_matrix(xt.theta, xt.tx, xt.ty)
            theirs = oracles.log_density(x_m, xt_m, 0.5)
            assert ours == pytest.approx(theirs, rel=1e-9, abs=1e-12)


angles = st.floats(-math.pi + 1e-6, math.pi, allow_nan=False)
coords = st.floats(-5.0, 5.0, allow_nan=False)


class TestProperties:
    @given(angles, coords, coords)
    @settings(max_examples=200, deadline=None)
    def test_inverse_round_trip(self, theta, tx, ty):
        p = Se2Pose(theta, tx, ty)
        ident = compose(p, inverse(p))
        assert abs(ident.tx) < 1e-12 + 1e-12 * (abs(tx) + abs(ty))
        assert abs(ident.ty) < 1e-12 + 1e-12 * (abs(tx) + abs(ty))
        assert abs(wrap_angle(ident.theta)) < 1e-12

    @given(
        st.floats(-3.0, 3.0, allow_nan=False),
        st.floats(-3.0, 3.0, allow_nan=False),
        st.floats(-math.pi + 0.01, math.pi - 0.01, allow_nan=False),
    )
    @settings(max_examples=200, deadline=None)
    def test_exp_log_round_trip(self, rx, ry, om):
        z = Twist(rx, ry, om)
        back = log_map(exp_map(z))
        assert np.max(np.abs(back.as_array() - z.as_array())) < 1e-9

    @given(angles)
    @settings(max_examples=200, deadline=None)
    def test_wrap_range(self, theta):
        w = wrap_angle(theta * 7.3)
        assert -math.pi < w <= math.pi
