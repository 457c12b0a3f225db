import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from evfield import rotations as rot

from oracles import central_difference, geodesic_logm, quat_to_matrix_scipy, rel_error


def random_quats(rng, n):
    return rot.canonicalize(rot.normalize(rng.normal(size=(n, 4))))


def rz(angle):
    return rot.from_axis_angle([0.0, 0.0, 1.0], angle)


class TestBasics:
    def test_canonicalize(self):
        q = np.array([-0.5, 0.5, 0.5, 0.5])
        np.testing.assert_array_equal(rot.canonicalize(q), -q)

    def test_unit_quaternion_rejects_non_unit(self):
        with pytest.raises(ValueError):
            rot.unit_quaternion([1.0, 0.1, 0.0, 0.0])
        with pytest.raises(ValueError):
            rot.unit_quaternion([1.0, 0.0, 0.0])

    def test_unit_quaternion_canonical(self):
        np.testing.assert_array_equal(rot.unit_quaternion([-1.0, 0, 0, 0]), rot.IDENTITY)

    def test_to_matrix_matches_scipy(self, rng):
        for q in random_quats(rng, 50):
            np.testing.assert_allclose(rot.to_matrix(q), quat_to_matrix_scipy(q), atol=1e-14)

    def test_from_matrix_inverts(self, rng):
        q = random_quats(rng, 100)
        np.testing.assert_allclose(rot.from_matrix(rot.to_matrix(q)), q, atol=1e-12)

    def test_mul_is_composition(self, rng):
        a, b = random_quats(rng, 20), random_quats(rng, 20)
        np.testing.assert_allclose(rot.to_matrix(rot.mul(a, b)), rot.to_matrix(a) @ rot.to_matrix(b), atol=1e-13)

    def test_mul_matrices(self, rng):
        a, b = random_quats(rng, 5), random_quats(rng, 5)
        np.testing.assert_allclose(np.einsum("nij,nj->ni", rot.left_matrix(a), b), rot.mul(a, b), atol=1e-15)
        np.testing.assert_allclose(np.einsum("nij,nj->ni", rot.right_matrix(b), a), rot.mul(a, b), atol=1e-15)

    def test_log_vec_of_axis_angle(self):
        q = rot.from_axis_angle([1.0, 0.0, 0.0], 0.6)
        np.testing.assert_allclose(rot.log_vec(q), [0.3, 0.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(rot.log_vec(-q), [0.3, 0.0, 0.0], atol=1e-15)

    def test_rotate(self):
        np.testing.assert_allclose(rot.rotate(rz(np.pi / 2), [1.0, 0, 0]), [0, 1.0, 0], atol=1e-15)


class TestGeodesic:
    def test_identity(self):
        assert rot.geodesic(np.eye(3), np.eye(3)) == 0.0

    def test_quarter_turn_matches_logm(self):
        Rz = rot.to_matrix(rz(np.pi / 2))
        assert rot.geodesic(np.eye(3), Rz) == pytest.approx(2.221441469079183, abs=1e-12)
        assert rot.geodesic(np.eye(3), Rz) == pytest.approx(geodesic_logm(np.eye(3), Rz), abs=1e-12)

    def test_random_pairs_match_logm(self, rng):
        A = rot.to_matrix(random_quats(rng, 50))
        B = rot.to_matrix(random_quats(rng, 50))
        for a, b in zip(A, B):
            assert rot.geodesic(a, b) == pytest.approx(geodesic_logm(a, b), abs=1e-9)

    def test_symmetric(self, rng):
        A = rot.to_matrix(random_quats(rng, 100))
        B = rot.to_matrix(random_quats(rng, 100))
        np.testing.assert_allclose(rot.geodesic(A, B), rot.geodesic(B, A), atol=1e-12)

    def test_triangle_inequality(self, rng):
        A, B, C = (rot.to_matrix(random_quats(rng, 200)) for _ in range(3))
        assert np.all(rot.geodesic(A, B) <= rot.geodesic(A, C) + rot.geodesic(C, B) + 1e-9)

    def test_quat_form_agrees(self, rng):
        a, b = random_quats(rng, 50), random_quats(rng, 50)
        np.testing.assert_allclose(rot.quat_geodesic(a, b), rot.geodesic(rot.to_matrix(a), rot.to_matrix(b)),
                                   atol=1e-9)


class TestSlerp:
    def test_endpoints_exact(self, rng):
        a, b = random_quats(rng, 10), random_quats(rng, 10)
        np.testing.assert_array_equal(rot.slerp(a, b, np.zeros(10)), a)
        b_short = np.where((np.sum(a * b, -1) < 0)[:, None], -b, b)
        np.testing.assert_array_equal(rot.slerp(a, b, np.ones(10)), b_short)

    def test_halfway_quarter_turn(self):
        np.testing.assert_allclose(rot.slerp(rot.IDENTITY, rz(np.pi / 2), 0.5), rz(np.pi / 4), atol=1e-15)

    def test_angles_proportional(self, rng):
        a, b = random_quats(rng, 200), random_quats(rng, 200)
        u = rng.uniform(0, 1, 200)
        out = rot.slerp(a, b, u)
        np.testing.assert_allclose(rot.angle_between(a, out), u * rot.angle_between(a, b), atol=1e-9)

    def test_nearby_inputs(self):
        a = rot.IDENTITY
        b = rz(1e-9)
        out = rot.slerp(a, b, 0.5)
        assert rot.angle_between(a, out) == pytest.approx(0.5e-9, rel=1e-6)

    def test_antipodal_input_takes_short_arc(self):
        out = rot.slerp(rot.IDENTITY, -rz(0.2), 0.5)
        assert rot.angle_between(rot.IDENTITY, out) == pytest.approx(0.1, abs=1e-12)

    def test_opposite_rotation_branch(self):
        # dot == 0: a half turn relative to q0; the arc runs through q1 as given
        q1 = rz(np.pi)
        out = rot.slerp(rot.IDENTITY, q1, 0.5)
        np.testing.assert_allclose(out, rz(np.pi / 2), atol=1e-15)


class TestBackward:
    def test_to_matrix_backward_fd(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            q = rng.normal(size=4)
            gR = rng.normal(size=(3, 3))
            ref = central_difference(lambda v: float(np.sum(rot.to_matrix(v) * gR)), q)
            assert rel_error(rot.to_matrix_backward(q, gR), ref) < 1e-8

    def test_mul_backward_fd(self):
        rng = np.random.default_rng(5)
        a, b, g = rng.normal(size=(3, 4))
        ga, gb = rot.mul_backward(a, b, g)
        assert rel_error(ga, central_difference(lambda v: float(rot.mul(v, b) @ g), a)) < 1e-8
        assert rel_error(gb, central_difference(lambda v: float(rot.mul(a, v) @ g), b)) < 1e-8

    def test_normalize_backward_fd(self):
        rng = np.random.default_rng(6)
        u, g = rng.normal(size=(2, 4))
        ref = central_difference(lambda v: float(rot.normalize(v) @ g), u)
        assert rel_error(rot.normalize_backward(u, g), ref) < 1e-8

    def test_geodesic_backward_fd(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            q, r = random_quats(rng, 2)
            ref = central_difference(lambda v: float(rot.quat_geodesic(rot.normalize(v), r)), q)
            got = rot.normalize_backward(q, rot.quat_geodesic_backward(q, r, 1.0))
            assert rel_error(got, ref) < 1e-6

    def test_geodesic_backward_zero_at_target(self):
        q = rz(0.3)
        np.testing.assert_array_equal(rot.quat_geodesic_backward(q, q, 1.0), np.zeros(4))


quat = st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


@settings(max_examples=100, deadline=None)
@given(quat, quat)
def test_geodesic_sign_invariant(a, b):
    a, b = rot.normalize(np.array(a)), rot.normalize(np.array(b))
    d = rot.quat_geodesic(a, b)
    assert rot.quat_geodesic(-a, b) == pytest.approx(d, abs=1e-9)
    assert 0.0 <= d <= np.sqrt(2) * np.pi + 1e-12


@settings(max_examples=100, deadline=None)
@given(quat)
def test_from_matrix_round_trip_scipy(q):
    q = rot.canonicalize(rot.normalize(np.array(q)))
    R = Rotation.from_quat(np.roll(q, -1)).as_matrix()
    back = rot.from_matrix(R)
    assert min(np.abs(back - q).max(), np.abs(back + q).max()) < 1e-9
