import numpy as np
import pytest

from lio.geometry import (
    Pose,
    Rotation,
    compose,
    inverse,
    rotation_from_vector,
    skew,
    transform_point,
)


def matrix_exp_series(phi, terms=50):
    """Brute-force matrix exponential of [phi]_x, independent of the library."""
    a = skew(np.asarray(phi, dtype=float))
    result = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms):
        term = term @ a / k
        result = result + term
    return result


def random_rotvec(rng, max_angle=np.pi - 1e-3):
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


class TestRotationFromVector:
    def test_zero_vector_is_identity(self):
        r = rotation_from_vector(np.zeros(3))
        assert np.allclose(r.as_matrix(), np.eye(3), atol=1e-15)

    def test_quarter_turn_about_z(self):
        r = rotation_from_vector(np.array([0.0, 0.0, np.pi / 2]))
        assert np.allclose(r.apply(np.array([1.0, 0.0, 0.0])), [0.0, 1.0, 0.0], atol=1e-12)

    def test_matches_series_expansion_oracle(self):
        phi = np.array([0.3, -0.2, 0.1])
        expected = matrix_exp_series(phi)
        assert np.abs(rotation_from_vector(phi).as_matrix() - expected).max() < 1e-12

    def test_series_oracle_over_random_vectors(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            phi = random_rotvec(rng)
            expected = matrix_exp_series(phi)
            assert np.abs(rotation_from_vector(phi).as_matrix() - expected).max() < 1e-11

    def test_continuity_at_zero(self):
        e = np.array([1.0, 0.0, 0.0])
        deviations = [
            np.abs(rotation_from_vector(eps * e).as_matrix() - np.eye(3)).max()
            for eps in (1e-2, 1e-4, 1e-6, 1e-8, 1e-10)
        ]
        assert all(d1 > d2 or d2 < 1e-12 for d1, d2 in zip(deviations, deviations[1:]))
        assert deviations[-1] < 1e-9

    def test_exp_log_roundtrip_below_pi(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            phi = random_rotvec(rng)
            r = rotation_from_vector(phi)
            assert np.allclose(r.as_rotvec(), phi, atol=1e-9)
            assert np.allclose(rotation_from_vector(r.as_rotvec()).as_matrix(), r.as_matrix(), atol=1e-9)


class TestRotationInvariants:
    def test_matrix_orthonormal_and_proper(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            m = rotation_from_vector(random_rotvec(rng)).as_matrix()
            assert np.abs(m.T @ m - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(m) - 1.0) < 1e-9

    def test_from_matrix_roundtrip(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            r = rotation_from_vector(random_rotvec(rng))
            r2 = Rotation.from_matrix(r.as_matrix())
            assert np.abs(r2.as_matrix() - r.as_matrix()).max() < 1e-12

    def test_slerp_endpoints_and_midpoint(self):
        a = rotation_from_vector(np.array([0.0, 0.0, 0.2]))
        b = rotation_from_vector(np.array([0.0, 0.0, 0.8]))
        assert a.slerp(b, 0.0).angle_to(a) < 1e-12
        assert a.slerp(b, 1.0).angle_to(b) < 1e-12
        mid = a.slerp(b, 0.5)
        assert np.allclose(mid.as_rotvec(), [0.0, 0.0, 0.5], atol=1e-12)


def random_pose(rng):
    return Pose(rotation_from_vector(random_rotvec(rng)), rng.uniform(-10, 10, 3))


class TestPoseOps:
    def test_identity_composition(self):
        rng = np.random.default_rng(4)
        p = random_pose(rng)
        q = compose(Pose.identity(), p)
        assert np.abs(q.as_matrix() - p.as_matrix()).max() < 1e-12

    def test_inverse_law_on_points(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            p = random_pose(rng)
            x = rng.uniform(-5, 5, 3)
            back = transform_point(inverse(p), transform_point(p, x))
            assert np.abs(back - x).max() < 1e-9

    def test_composition_matches_homogeneous_matrix_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            a, b = random_pose(rng), random_pose(rng)
            x = rng.uniform(-5, 5, 3)
            expected_matrix = a.as_matrix() @ b.as_matrix()
            c = compose(a, b)
            assert np.abs(c.as_matrix() - expected_matrix).max() < 1e-9
            expected_point = (expected_matrix @ np.array([*x, 1.0]))[:3]
            assert np.abs(transform_point(c, x) - expected_point).max() < 1e-9
            assert np.abs(
                transform_point(c, x) - transform_point(a, transform_point(b, x))
            ).max() < 1e-9

    def test_group_axioms_thousand_samples(self):
        rng = np.random.default_rng(8)
        identity = np.eye(4)
        for _ in range(1000):
            p = random_pose(rng)
            assert np.abs((p @ p.inverse()).as_matrix() - identity).max() < 1e-9
            assert np.abs((p.inverse() @ p).as_matrix() - identity).max() < 1e-9

    def test_associativity(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            a, b, c = (random_pose(rng) for _ in range(3))
            lhs = ((a @ b) @ c).as_matrix()
            rhs = (a @ (b @ c)).as_matrix()
            assert np.abs(lhs - rhs).max() < 1e-9

    def test_vectorized_transform_matches_pointwise(self):
        rng = np.random.default_rng(10)
        p = random_pose(rng)
        pts = rng.uniform(-5, 5, (40, 3))
        batch = p.transform(pts)
        for i in range(len(pts)):
            assert np.abs(batch[i] - transform_point(p, pts[i])).max() < 1e-12


def test_normalize_rejects_zero_quaternion():
    with pytest.raises(ValueError):
        Rotation.from_quat(np.zeros(4))
